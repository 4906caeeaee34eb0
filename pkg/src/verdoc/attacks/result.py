"""Common result record for every attack."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..doctree import DocTree, save_tree
from ..featurespace import set_bits


@dataclass
class AttackResult:
    success: bool
    vector: np.ndarray | None = None
    tree: DocTree | None = None
    l0_distance: int = 0
    iterations: int = 0
    mutation_trace: list = field(default_factory=list)
    still_malicious: bool | None = None
    seed_id: str = ""
    attack: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self, with_tree: bool = False) -> str:
        out: dict[str, Any] = {
            "seed_id": self.seed_id,
            "attack": self.attack,
            "success": bool(self.success),
            "l0_distance": int(self.l0_distance),
            "iterations": int(self.iterations),
            "trace_length": len(self.mutation_trace),
            "mutation_trace": [list(map(str, op)) if isinstance(op, tuple) else str(op)
                               for op in self.mutation_trace],
            "still_malicious": self.still_malicious,
            "vector": set_bits(self.vector) if self.vector is not None else None,
            "extra": self.extra,
        }
        if with_tree and self.tree is not None:
            out["tree"] = json.loads(save_tree(self.tree))
        return json.dumps(out, sort_keys=True)
