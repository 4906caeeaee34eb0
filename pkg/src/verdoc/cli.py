"""Command-line pipeline: gen-synth, build-vocab, extract, train, verify, attack, evaluate, report.

Every command reads its inputs from flags (or a JSON ``--config`` whose keys
fill in flag defaults), writes into ``--out`` and stamps a provenance line on
its outputs.  Exit codes: 0 success, 1 configuration error, 2 data error,
3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (BoostedTree, EnsembleWrapper, train_ensemble, train_monotonic, vra_ensemble_ab,
                        vra_ensemble_d, vra_monotonic)
from .doctree import load_tree
from .errors import ConfigError, VerdocError
from .featurespace import (build_vocabulary, extract_features, load_features, load_vocabulary, save_features,
                           save_vocabulary)
from .mlp import MlpModel, TrainConfig, load_model, model_metadata, save_model
from .pdf import parse_pdf
from .properties import resolve
from .synth import derive_seed, write_corpus
from .train import Dataset, adv_retrain, evaluate, train_regular, train_robust
from .verify import report_csv, verify_samples

log = logging.getLogger("verdoc")

MODES = ("regular", "robust", "adv", "ensemble-ab", "ensemble-d", "monotonic")
ATTACKS = ("bounded", "unbounded", "evolution", "move", "scatter", "combo", "mimicry")
TABLE_COLUMNS = ("Model", "Acc", "FPR", "Train(m)", "VRA A", "VRA B", "VRA C", "VRA D", "VRA E")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# -- helpers -----------------------------------------------------------------


def _provenance(args) -> dict:
    conf = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "workers", "out")}
    digest = hashlib.sha256(json.dumps(conf, sort_keys=True, default=str).encode()).hexdigest()[:16]
    return {"tool": "verdoc", "version": __version__, "command": args.command, "seed": args.seed,
            "config_hash": digest, "numpy": np.__version__}


def _header(args) -> str:
    p = _provenance(args)
    return "# " + " ".join(f"{k}={p[k]}" for k in sorted(p)) + "\n"


def _out(args, name: str) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _read(path) -> str:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p} does not exist")
    return p.read_text()


def read_corpus(root) -> list[tuple[str, object, int]]:
    """``labels.csv`` plus ``trees/<id>.json`` or ``<id>.pdf`` (top level or under ``pdfs/``)."""
    root = Path(root)
    labels = root / "labels.csv"
    if not labels.exists():
        raise ConfigError(f"{labels} does not exist")
    out = []
    for line in labels.read_text().splitlines()[1:]:
        if not line.strip():
            continue
        doc_id, label = line.split(",")[:2]
        for cand in (root / "trees" / f"{doc_id}.json", root / f"{doc_id}.pdf", root / "pdfs" / f"{doc_id}.pdf"):
            if cand.exists():
                tree = load_tree(cand.read_text()) if cand.suffix == ".json" else parse_pdf(cand.read_bytes())
                break
        else:
            raise FileNotFoundError(f"no document for id {doc_id} under {root}")
        out.append((doc_id, tree, int(label)))
    return out


def _vocab(args):
    return load_vocabulary(_read(args.vocab))


def _dataset(args, vocab) -> Dataset:
    X, y, ids = load_features(_read(args.features), vocab.dim)
    return Dataset.split(X, y, ids, args.test_fraction, derive_seed(args.seed, "split"))


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                       rng_seed=derive_seed(args.seed, "train") % 2 ** 32,
                       hidden=tuple(args.hidden), bound_method=args.bound)


def _props(text: str, vocab) -> list:
    if text in ("", "none"):
        return []
    return resolve([c for c in text.replace(",", "") if c.strip()], vocab)


def save_any(model, path: Path, meta: dict) -> None:
    if isinstance(model, BoostedTree):
        path.write_text(model.to_json())
        meta["model_type"] = "monotonic"
    else:
        base = model.base if isinstance(model, EnsembleWrapper) else model
        path.write_bytes(save_model(base))
        meta["model_type"] = f"ensemble-{model.mode.lower()}" if isinstance(model, EnsembleWrapper) else "mlp"
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_any(path, vocab):
    path = Path(path)
    meta_path = Path(str(path) + ".json")
    meta = json.loads(_read(meta_path)) if meta_path.exists() else {"model_type": "mlp"}
    kind = meta.get("model_type", "mlp")
    if kind == "monotonic":
        return BoostedTree.from_json(_read(path)), meta
    if not path.exists():
        raise ConfigError(f"{path} does not exist")
    base = load_model(path.read_bytes())
    if kind.startswith("ensemble-"):
        return EnsembleWrapper(base, kind.split("-")[1].upper(), vocab), meta
    return base, meta


def vra_function(model, vocab, method: str = "symbolic"):
    """The verifier matching the model family, or None for plain networks."""
    if isinstance(model, BoostedTree):
        return lambda m, X, spec: vra_monotonic(m, X, vocab, spec)
    if isinstance(model, EnsembleWrapper):
        fn = vra_ensemble_ab if model.mode == "AB" else vra_ensemble_d
        return lambda m, X, spec: fn(m, X, spec, method)
    return None


# -- commands ----------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    root = write_corpus(Path(args.out) / "corpus", args.n_benign, args.n_malicious, derive_seed(args.seed, "corpus"))
    (root / "PROVENANCE").write_text(_header(args))
    print(f"wrote {args.n_benign + args.n_malicious} trees to {root}")
    return 0


def cmd_build_vocab(args) -> int:
    docs = read_corpus(args.corpus)
    vocab = build_vocabulary([t for _, t, _ in docs], args.min_df)
    _out(args, "vocab.txt").write_text(_header(args) + save_vocabulary(vocab))
    print(f"vocabulary: {vocab.dim} paths in {vocab.n_subtrees} subtrees (digest {vocab.digest()})")
    return 0


def cmd_extract(args) -> int:
    vocab = _vocab(args)
    docs = read_corpus(args.corpus)
    X = np.stack([extract_features(t, vocab) for _, t, _ in docs]) if docs else np.zeros((0, vocab.dim), np.uint8)
    text = save_features(X, [y for *_, y in docs], [i for i, _, _ in docs])
    _out(args, "features.txt").write_text(_header(args) + text)
    print(f"extracted {len(docs)} feature vectors")
    return 0


def cmd_train(args) -> int:
    vocab = _vocab(args)
    ds = _dataset(args, vocab)
    specs = _props(args.property, vocab)
    cfg = _train_config(args)
    history: list = []
    t0 = time.perf_counter()
    mode = args.mode
    if mode == "robust" and not specs:
        mode = "regular"  # a robust run without properties is regular training
    if mode == "regular":
        model = train_regular(ds, cfg, history)
    elif mode == "robust":
        model = train_robust(ds, specs, cfg, vocab, history)
    elif mode == "adv":
        if not specs:
            raise ConfigError("adversarial retraining needs --property")
        model = adv_retrain(ds, specs, cfg, vocab, history=history)
    elif mode in ("ensemble-ab", "ensemble-d"):
        model = train_ensemble(ds.X_train, ds.y_train, vocab, mode.split("-")[1].upper(), cfg)
    else:
        model = train_monotonic(ds.X_train, ds.y_train, n_learners=args.n_learners)
    minutes = (time.perf_counter() - t0) / 60
    net = model if isinstance(model, MlpModel) else getattr(model, "base", None)
    if net is not None:
        meta = json.loads(model_metadata(net, vocab.digest(), cfg))
    else:
        meta = {"vocab_digest": vocab.digest(), "n_learners": args.n_learners}
    meta.update(mode=mode, properties=[s.label for s in specs], history=history,
                test_ids=ds.ids_test, provenance=_provenance(args))
    save_any(model, _out(args, args.model_name), meta)
    # wall-clock time varies between runs, so it lives in its own file
    _out(args, args.model_name + ".time").write_text(f"{minutes:.4f}\n")
    print(f"trained {mode} model on {len(ds.X_train)} samples in {minutes:.2f} min")
    return 0


def cmd_verify(args) -> int:
    vocab = _vocab(args)
    model, _ = load_any(args.model, vocab)
    ds = _dataset(args, vocab)
    mal = ds.malicious_test
    ids = ds.malicious_test_ids
    lines = []
    summary = {}
    for spec in _props(args.property, vocab):
        if isinstance(model, MlpModel):
            chunks = [range(i, min(i + 16, len(mal))) for i in range(0, len(mal), 16)]

            def run(rows):
                rows = list(rows)
                return verify_samples(model, mal[rows], vocab, spec, args.bound, [ids[r] for r in rows])

            with ThreadPoolExecutor(max(1, args.workers)) as pool:
                verdicts = [v for part in pool.map(run, chunks) for v in part]
            verdicts.sort(key=lambda v: v.sample_id)
            lines.append(report_csv(verdicts))
            summary[spec.label] = sum(v.verified for v in verdicts) / max(len(verdicts), 1)
        else:
            summary[spec.label] = float(vra_function(model, vocab, args.bound)(model, mal, spec))
    text = _header(args) + "".join(lines[:1] + [ln.split("\n", 1)[1] for ln in lines[1:]])
    _out(args, "verify.csv").write_text(text)
    _out(args, "vra.json").write_text(json.dumps({"vra": summary, "provenance": _provenance(args)},
                                                 sort_keys=True, indent=1) + "\n")
    for k, v in summary.items():
        print(f"VRA {k}: {100 * v:.2f}%")
    return 0


def cmd_attack(args) -> int:
    from .attacks import (AttackResult, EvoConfig, GenomeTrie, bounded_attack_batch, campaign, extract_payload,
                          median_cost, pick_donors, reverse_mimicry, unbounded_gradient_attack)
    from .doctree import is_malicious_proxy
    from .attacks.evolution import model_predict

    vocab = _vocab(args)
    model, meta = load_any(args.model, vocab)
    docs = {i: (t, y) for i, t, y in read_corpus(args.corpus)}
    test_ids = set(meta.get("test_ids") or docs)
    seeds = sorted(i for i in test_ids if i in docs and docs[i][1] == 1)
    if args.max_seeds:
        seeds = seeds[:args.max_seeds]
    benign_train = [docs[i][0] for i in sorted(docs) if docs[i][1] == 0 and i not in test_ids]
    grad_model = getattr(model, "base", model)
    results = []
    if args.attack in ("bounded", "unbounded"):
        if not isinstance(grad_model, MlpModel):
            raise ConfigError("gradient attacks need a neural network model")
        X = np.stack([extract_features(docs[i][0], vocab) for i in seeds])
        pred = (lambda V: model_predict(model, V))
        if args.attack == "bounded":
            for spec in _props(args.property or "B", vocab):
                for r in bounded_attack_batch(grad_model, X, vocab, spec, pred, seeds):
                    r.extra["property"] = spec.label
                    results.append(r)
        else:
            for sid, x in zip(seeds, X):
                r = unbounded_gradient_attack(grad_model, x, args.max_iters, pred)
                r.seed_id = sid
                results.append(r)
    elif args.attack == "mimicry":
        hosts = [docs[i][0] for i in sorted(test_ids) if i in docs and docs[i][1] == 0] or benign_train
        for k, sid in enumerate(seeds):
            tree = reverse_mimicry(hosts[k % len(hosts)], extract_payload(docs[sid][0]))
            x = extract_features(tree, vocab)
            ok = bool(model_predict(model, x[None])[0] == 0)
            results.append(AttackResult(ok, x, tree, int((x != extract_features(docs[sid][0], vocab)).sum()),
                                        1, [("mimicry", sid)], is_malicious_proxy(tree), sid, "mimicry"))
    else:
        policy = {"evolution": "base"}.get(args.attack, args.attack)
        cfg = EvoConfig(rounds=args.rounds, generations=args.generations, population=args.population,
                        seed=derive_seed(args.seed, "attack") % 2 ** 32, policy=policy, n_donors=args.donors)
        trie = GenomeTrie(pick_donors(model, benign_train, vocab, cfg.n_donors), vocab)
        trees = [docs[i][0] for i in seeds]
        parts = [list(range(w, len(seeds), max(1, args.workers))) for w in range(max(1, args.workers))]

        def run(rows):
            return campaign(model, [trees[r] for r in rows], trie, cfg, [seeds[r] for r in rows])

        with ThreadPoolExecutor(max(1, args.workers)) as pool:
            results = [r for part in pool.map(run, parts) for r in part]
        results.sort(key=lambda r: r.seed_id)
    for r in results:
        r.attack = r.attack or args.attack
        if r.success:  # independent re-check of every claimed evasion
            if model_predict(model, r.vector[None])[0] != 0:
                raise AssertionError(f"attack on {r.seed_id} claims success on a malicious-classified vector")
    path = _out(args, f"attack_{args.attack}.jsonl")
    path.write_text(json.dumps({"provenance": _provenance(args)}, sort_keys=True) + "\n"
                    + "".join(r.to_json() + "\n" for r in results))
    era = 1 - np.mean([r.success for r in results]) if results else float("nan")
    print(f"{args.attack}: {len(results)} seeds, ERA {100 * era:.2f}%, median L0 {median_cost(results)}")
    return 0


def cmd_evaluate(args) -> int:
    vocab = _vocab(args)
    model, meta = load_any(args.model, vocab)
    ds = _dataset(args, vocab)
    specs = _props(args.property, vocab)
    m = evaluate(model, ds, specs, vocab, vra_function(model, vocab, args.bound), era=True, method=args.bound)
    # training time stays in the model's .time sidecar; report picks it up from there
    out = {"model": args.name or Path(args.model).name, "model_path": str(args.model), "metrics": m.to_json(),
           "provenance": _provenance(args)}
    _out(args, f"metrics_{out['model']}.json").write_text(json.dumps(out, sort_keys=True, indent=1) + "\n")
    print(f"{out['model']}: acc {100 * m.accuracy:.2f}% fpr {100 * m.fpr:.2f}% "
          + " ".join(f"VRA {k} {100 * v:.2f}%" for k, v in m.vra.items()))
    return 0


def format_table(rows: list[dict]) -> str:
    """Markdown table with one row per model: Acc, FPR, Train(m) and VRA A to E in percent."""
    def pct(v):
        return "-" if v is None else f"{100 * v:.2f}"

    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "---|" * len(TABLE_COLUMNS)]
    for row in rows:
        m = row["metrics"]
        t = m.get("train_minutes")
        cells = [row["model"], pct(m["accuracy"]), pct(m["fpr"]), "-" if t is None else f"{t:.2f}"]
        cells += [pct(m["vra"].get(k)) for k in "ABCDE"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    from .attacks import AttackResult, attack_report

    rows = [json.loads(_read(p)) for p in args.metrics]
    for row in rows:
        time_file = Path(str(row.get("model_path", "")) + ".time")
        if row.get("model_path") and time_file.exists():
            row["metrics"]["train_minutes"] = float(time_file.read_text())
    rows.sort(key=lambda r: r["model"])
    _out(args, "table.md").write_text(format_table(rows))
    runs = {}
    for p in args.attacks:
        lines = _read(p).splitlines()
        name = Path(p).parent.name + "/" + Path(p).stem
        res = []
        for line in lines[1:]:
            obj = json.loads(line)
            res.append(AttackResult(obj["success"], None, None, obj["l0_distance"], obj["iterations"],
                                    obj["mutation_trace"], obj["still_malicious"], obj["seed_id"]))
        runs[name] = res
    if runs:
        attack_report(runs, args.out)
    print(format_table(rows), end="")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="verdoc", description="Verifiably robust document-malware classifiers.")
    p.add_argument("--config", help="JSON file whose keys provide flag defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="out")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data(sp, features=True):
        sp.add_argument("--vocab", required=True)
        if features:
            sp.add_argument("--features", required=True)
            sp.add_argument("--test-fraction", type=float, default=0.3)

    sp = sub.add_parser("gen-synth", help="generate a synthetic tree corpus")
    sp.add_argument("--n-benign", type=int, default=200)
    sp.add_argument("--n-malicious", type=int, default=200)
    sp.set_defaults(func=cmd_gen_synth)

    sp = sub.add_parser("build-vocab", help="collect structural paths")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--min-df", type=int, default=1)
    sp.set_defaults(func=cmd_build_vocab)

    sp = sub.add_parser("extract", help="write sparse feature vectors")
    sp.add_argument("--corpus", required=True)
    data(sp, features=False)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train", help="train a classifier")
    data(sp)
    sp.add_argument("--mode", choices=MODES, default="robust")
    sp.add_argument("--property", default="none", help="property letters such as B or AB, or 'none'")
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--batch-size", type=int, default=50)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--hidden", type=int, nargs="+", default=[200, 200])
    sp.add_argument("--bound", choices=("symbolic", "naive"), default="symbolic")
    sp.add_argument("--n-learners", type=int, default=100)
    sp.add_argument("--model-name", default="model.bin")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("verify", help="verify properties on the malicious test split")
    data(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--property", default="ABCDE")
    sp.add_argument("--bound", choices=("symbolic", "naive"), default="symbolic")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("attack", help="attack the malicious test documents")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--attack", choices=ATTACKS, default="evolution")
    sp.add_argument("--property", default="")
    sp.add_argument("--max-seeds", type=int, default=0)
    sp.add_argument("--max-iters", type=int, default=200_000)
    sp.add_argument("--rounds", type=int, default=5)
    sp.add_argument("--generations", type=int, default=20)
    sp.add_argument("--population", type=int, default=48)
    sp.add_argument("--donors", type=int, default=4)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("evaluate", help="accuracy, FPR, VRA and bounded-attack ERA")
    data(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--name", default="")
    sp.add_argument("--property", default="ABCDE")
    sp.add_argument("--bound", choices=("symbolic", "naive"), default="symbolic")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="metrics table and ERA curves")
    sp.add_argument("--metrics", nargs="*", default=[])
    sp.add_argument("--attacks", nargs="*", default=[])
    sp.set_defaults(func=cmd_report)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        conf = json.loads(_read(known.config))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not JSON: {exc}") from exc
    if not isinstance(conf, dict):
        raise ConfigError("config must be a JSON object")
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    top = {k.replace("-", "_"): v for k, v in conf.items() if not isinstance(v, dict)}
    glob = {a.dest for a in parser._actions}
    parser.set_defaults(**{k: v for k, v in top.items() if k in glob})
    for name, sp in subs.items():
        dests = {a.dest for a in sp._actions}
        section = {k.replace("-", "_"): v for k, v in conf.get(name, {}).items()}
        unknown = set(section) - dests
        if unknown:
            raise ConfigError(f"unknown keys for {name}: {sorted(unknown)}")
        sp.set_defaults(**{k: v for k, v in top.items() if k in dests}, **section)
    stray = set(top) - glob - set().union(*({a.dest for a in sp._actions} for sp in subs.values()))
    if stray:
        raise ConfigError(f"unknown config keys: {sorted(stray)}")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("VERDOC_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (VerdocError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a bug
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
