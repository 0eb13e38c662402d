"""Command-line surface.

Subcommands: train, parse, eval, self-f1, select, baseline, concreteness,
correlate.  Every command exits 0 on success and 2 with a single
"vgnsl: error: ..." line on stderr for anything expected to go wrong.
"""
from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import baselines as bl
from . import corpus as cp
from . import evaluation as ev
from . import training as tr
from .errors import ConfigError, DataError, VgnslError
from .parser import ModelParams, parse
from .trees import SpanPolicy, format_binary, read_binary_file, read_labeled_file
from .vse import VseHyper

SCHEMA_VERSION = 1

_POLICIES = {p.value: p for p in SpanPolicy}

# TrainConfig fields the config file and the train flags may set.
_CONFIG_FIELDS = {
    "epochs": int,
    "batch_size": int,
    "lr_phase1": float,
    "lr_phase2": float,
    "phase_switch_epoch": int,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "seed": int,
    "head_initial": bool,
    "clip_norm": float,
    "reset_moments_on_switch": bool,
    "reward_baseline": bool,
    "baseline_decay": float,
    "embed_dim": int,
    "hidden_dim": int,
    "normalize_embeddings": bool,
    "margin": float,
    "margin_c": float,
    "hi_weight": float,
}


def _coerce(key: str, raw: str):
    kind = _CONFIG_FIELDS[key]
    if kind is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: expected {kind.__name__}, got {raw!r}")


def load_config_file(path) -> Dict[str, object]:
    """key = value lines; # starts a comment; unknown keys are rejected."""
    out: Dict[str, object] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, raw = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _coerce(key, raw.strip())
    return out


def _resolve_seed(flag_value: Optional[int], config: Dict[str, object]) -> int:
    if flag_value is not None:
        return flag_value
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("VGNSL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"VGNSL_SEED must be an integer, got {env!r}")
    return 0


def _build_train_config(args) -> tr.TrainConfig:
    overlay = load_config_file(args.config) if args.config else {}
    values: Dict[str, object] = {}
    hyper_values: Dict[str, object] = {}
    for key in _CONFIG_FIELDS:
        flag = getattr(args, key, None)
        value = flag if flag is not None else overlay.get(key)
        if value is None:
            continue
        if key in ("margin", "margin_c", "hi_weight"):
            hyper_values[key] = value
        elif key != "seed":
            values[key] = value
    values["seed"] = _resolve_seed(getattr(args, "seed", None), overlay)
    return tr.TrainConfig(hyper=VseHyper(**hyper_values), **values)


def _load_examples(args, vocab: cp.Vocabulary):
    token_lists = cp.load_captions(args.captions)
    captions = cp.encode_captions(token_lists, vocab)
    features = cp.load_features(args.features)
    manifest = cp.load_manifest(args.manifest) if args.manifest else None
    cpi = None if manifest else args.captions_per_image
    return token_lists, cp.pair_examples(captions, features, cpi, manifest)


def cmd_train(args) -> int:
    config = _build_train_config(args)
    vocab = cp.build_vocab(args.captions, max_size=args.vocab_size, min_count=args.min_count)
    _, examples = _load_examples(args, vocab)
    word_vectors = cp.load_word_vectors(args.word_vectors) if args.word_vectors else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train.log.jsonl"

    with open(log_path, "w", encoding="utf-8") as log_file:

        def log_fn(entry: dict) -> None:
            log_file.write(json.dumps(entry, sort_keys=True) + "\n")

        def checkpoint_fn(epoch: int, ckpt: tr.Checkpoint) -> None:
            tr.save_checkpoint(out_dir / f"epoch_{epoch + 1:03d}.vgnc", ckpt)

        _, stats = tr.train(
            examples, vocab, config,
            checkpoint_fn=checkpoint_fn, log_fn=log_fn, word_vectors=word_vectors,
        )
    for st in stats:
        print(
            f"epoch {st.epoch + 1}: loss {st.mean_loss:.4f} "
            f"reward {st.mean_reward:.4f} lr {st.lr:g} "
            f"({st.merges_per_second:.0f} merges/s)"
        )
    return 0


_WORKER_PARAMS: Optional[ModelParams] = None


def _init_worker(params: ModelParams) -> None:
    global _WORKER_PARAMS
    _WORKER_PARAMS = params


def _parse_job(job) -> str:
    ids, tokens = job
    result = parse(ids, _WORKER_PARAMS, mode="greedy")
    return format_binary(result.tree, tokens)


def parse_corpus(
    params: ModelParams, vocab: cp.Vocabulary, token_lists: Sequence[Sequence[str]],
    workers: int = 1,
) -> List[str]:
    """Greedy-decode every caption to a bracketed line; order preserved."""
    jobs = [(vocab.encode(toks), list(toks)) for toks in token_lists]
    if workers <= 1:
        _init_worker(params)
        return [_parse_job(job) for job in jobs]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(workers, initializer=_init_worker, initargs=(params,)) as pool:
        return pool.map(_parse_job, jobs, chunksize=32)


def cmd_parse(args) -> int:
    ckpt = tr.load_checkpoint(args.checkpoint)
    token_lists = cp.load_captions(args.captions)
    lines = parse_corpus(ckpt.params, ckpt.vocab, token_lists, workers=args.workers)
    with open(args.out, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
    return 0


def _print_json(payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    print(json.dumps(payload, sort_keys=True))


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:.1f}"


def cmd_eval(args) -> int:
    gold = read_labeled_file(args.gold)
    policy = _POLICIES[args.policy]
    labels = args.labels.split(",") if args.labels else ["NP", "VP", "PP", "ADJP"]
    runs = [[t for t, _ in read_binary_file(p)] for p in args.pred]
    reports = [ev.evaluate(run, gold, labels, policy) for run in runs]
    avg_f1 = float(np.mean([r.f1 for r in reports]))
    self_val = ev.self_f1(runs, policy) if len(runs) > 1 else None
    per_label = {
        lab: (
            None
            if all(r.per_label[lab] is None for r in reports)
            else float(np.mean([r.per_label[lab] for r in reports if r.per_label[lab] is not None]))
        )
        for lab in labels
    }
    if args.json:
        first = reports[0]
        _print_json(
            {
                "precision": float(np.mean([r.precision for r in reports])),
                "recall": float(np.mean([r.recall for r in reports])),
                "f1": avg_f1,
                "per_label": per_label,
                "n_sentences": first.n_sentences,
                "self_f1": self_val,
                "n_runs": len(runs),
            }
        )
        return 0
    for path, rep in zip(args.pred, reports):
        print(
            f"{path}: precision {_pct(rep.precision)} recall {_pct(rep.recall)} "
            f"f1 {_pct(rep.f1)}"
        )
    header = labels + ["Avg F1", "Self F1"]
    values = [_pct(per_label[lab]) for lab in labels] + [_pct(avg_f1), _pct(self_val)]
    width = max(len(h) for h in header) + 2
    print("".join(h.ljust(width) for h in header).rstrip())
    print("".join(v.ljust(width) for v in values).rstrip())
    return 0


_PAIR_STATE: dict = {}


def _init_pair_worker(runs, policy) -> None:
    _PAIR_STATE["runs"] = runs
    _PAIR_STATE["policy"] = policy


def _pair_f1_job(pair) -> float:
    i, k = pair
    return ev.corpus_f1(_PAIR_STATE["runs"][i], _PAIR_STATE["runs"][k], _PAIR_STATE["policy"]).f1


def cmd_self_f1(args) -> int:
    import itertools

    runs = [[t for t, _ in read_binary_file(p)] for p in args.runs]
    policy = _POLICIES[args.policy]
    if args.workers > 1:
        if len(runs) < 2:
            raise DataError("self-F1 needs at least 2 runs")
        pairs = list(itertools.combinations(range(len(runs)), 2))
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(args.workers, initializer=_init_pair_worker, initargs=(runs, policy)) as pool:
            value = float(np.mean(pool.map(_pair_f1_job, pairs)))
    else:
        value = ev.self_f1(runs, policy)
    if args.json:
        _print_json({"self_f1": value, "n_runs": len(runs)})
    else:
        print(f"self_f1 {_pct(value)}")
    return 0


def _load_grid(grid_dir: Path):
    runs = sorted(p for p in grid_dir.iterdir() if p.is_dir())
    if not runs:
        raise DataError(f"{grid_dir}: no run subdirectories")
    names, grid = [], []
    for run in runs:
        files = sorted(p for p in run.iterdir() if p.is_file())
        if not files:
            raise DataError(f"{run}: no checkpoint tree files")
        names.append([p.name for p in files])
        grid.append([[t for t, _ in read_binary_file(p)] for p in files])
    return [r.name for r in runs], names, grid


def cmd_select(args) -> int:
    run_names, file_names, grid = _load_grid(Path(args.grid))
    policy = _POLICIES[args.policy]
    objective = ev.tune_objective(grid, window=args.window, policy=policy)
    chosen, value = ev.select_checkpoints(grid, policy=policy)
    payload = {
        "runs": run_names,
        "selected": {run_names[i]: file_names[i][j] for i, j in enumerate(chosen)},
        "selected_indices": chosen,
        "objective": value,
        "tune_objective": objective,
        "window": args.window,
    }
    if args.json:
        _print_json(payload)
    else:
        print(f"tune_objective {objective:.4f} (window {args.window})")
        print(f"selected objective {value:.4f}")
        for i, j in enumerate(chosen):
            print(f"{run_names[i]}: {file_names[i][j]}")
    return 0


def cmd_baseline(args) -> int:
    token_lists = cp.load_captions(args.captions)
    trees: List[str] = []
    if args.kind in ("left", "right", "random"):
        rng = np.random.default_rng(_resolve_seed(args.seed, {}))
        for tokens in token_lists:
            tree = bl.trivial_tree(len(tokens), args.kind, rng)
            trees.append(format_binary(tree, tokens))
    elif args.kind == "pmi":
        train_lists = (
            cp.load_captions(args.train_captions) if args.train_captions else token_lists
        )
        stats = bl.pmi_statistics(train_lists, k=args.smoothing)
        dump = open(args.dump_distances, "w", encoding="utf-8") if args.dump_distances else None
        try:
            for idx, tokens in enumerate(token_lists):
                distances = bl.pmi_distances(stats, tokens)
                if dump is not None:
                    dump.write(bl.format_distance_dump(idx, distances) + "\n")
                trees.append(format_binary(bl.distance_parse(distances, len(tokens)), tokens))
        finally:
            if dump is not None:
                dump.close()
    elif args.kind == "concreteness":
        if not args.scores:
            raise ConfigError("--scores is required for the concreteness baseline")
        table = bl.load_word_scores(args.scores)
        for tokens in token_lists:
            tree = bl.parse_from_table(tokens, table, tau=args.tau, log_scores=args.log_scores)
            trees.append(format_binary(tree, tokens))
    else:
        raise ConfigError(f"unknown baseline kind {args.kind!r}")
    with open(args.out, "w", encoding="utf-8") as f:
        for line in trees:
            f.write(line + "\n")
    if args.json:
        _print_json({"kind": args.kind, "n_captions": len(trees), "out": str(args.out)})
    return 0


def cmd_concreteness(args) -> int:
    ckpt = tr.load_checkpoint(args.checkpoint)
    token_lists = cp.load_captions(args.captions)
    captions = cp.encode_captions(token_lists, ckpt.vocab)
    features = cp.load_features(args.features)
    manifest = cp.load_manifest(args.manifest) if args.manifest else None
    cpi = None if manifest else args.captions_per_image
    examples = cp.pair_examples(captions, features, cpi, manifest)
    table = bl.export_word_concreteness(
        ckpt.params, ckpt.vocab, examples, ckpt.config.hyper, batch_size=args.batch_size
    )
    if args.top:
        keep = [w for w in bl.most_frequent_words(token_lists, args.top) if w in table]
    else:
        keep = sorted(table)
    bl.save_word_scores(args.out, [(w, table[w]) for w in keep])
    if args.json:
        _print_json({"n_words": len(keep), "out": str(args.out)})
    return 0


def cmd_correlate(args) -> int:
    table_a = bl.load_word_scores(args.table_a).scores
    table_b = bl.load_word_scores(args.table_b).scores
    common = sorted(set(table_a) & set(table_b))
    if len(common) < 2:
        raise DataError("fewer than 2 words shared between the tables")
    r = ev.pearson([table_a[w] for w in common], [table_b[w] for w in common])
    if args.json:
        _print_json({"pearson": r, "n_words": len(common)})
    else:
        print(f"pearson {r:.4f} over {len(common)} words")
    return 0


def _add_policy(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--policy",
        choices=sorted(_POLICIES),
        default=SpanPolicy.EXCLUDE_TRIVIAL.value,
        help="which constituent spans count as brackets",
    )


def build_arg_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="vgnsl", description=__doc__)
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a grounded parser")
    p.add_argument("--captions", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--captions-per-image", type=int, default=1)
    p.add_argument("--vocab-size", type=int, default=10000)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--word-vectors")
    p.add_argument("--config", help="key = value overlay for training settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--head-initial", action="store_const", const=True, dest="head_initial")
    p.add_argument("--hi-weight", type=float, dest="hi_weight")
    p.add_argument("--margin", type=float)
    p.add_argument("--margin-c", type=float, dest="margin_c")
    p.add_argument("--lr", type=float, dest="lr_phase1")
    p.add_argument("--lr2", type=float, dest="lr_phase2")
    p.add_argument("--phase-switch", type=int, dest="phase_switch_epoch")
    p.add_argument("--clip-norm", type=float, dest="clip_norm")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument(
        "--no-normalize-embeddings",
        action="store_const", const=False, dest="normalize_embeddings",
    )
    p.add_argument("--reward-baseline", action="store_const", const=True, dest="reward_baseline")
    p.add_argument(
        "--no-reset-moments",
        action="store_const", const=False, dest="reset_moments_on_switch",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("parse", help="greedy-decode captions with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("eval", help="bracket F1 and per-label recall against gold trees")
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--labels", help="comma-separated label list")
    _add_policy(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("self-f1", help="mean pairwise F1 across runs")
    p.add_argument("runs", nargs="+")
    _add_policy(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_self_f1)

    p = sub.add_parser("select", help="checkpoint selection by pairwise agreement")
    p.add_argument("--grid", required=True, help="directory of run subdirectories")
    p.add_argument("--window", type=int, default=2)
    _add_policy(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("baseline", help="trivial, PMI, or concreteness parsers")
    p.add_argument("--kind", required=True, choices=["left", "right", "random", "pmi", "concreteness"])
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-captions", help="corpus for PMI statistics (defaults to --captions)")
    p.add_argument("--smoothing", type=float, default=1.0, help="zero-count floor for bigrams")
    p.add_argument("--dump-distances", help="write caption_index<TAB>d1,d2,... lines here")
    p.add_argument("--scores", help="word<TAB>score table for the concreteness baseline")
    p.add_argument("--tau", type=float, default=20.0)
    p.add_argument("--log-scores", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("concreteness", help="export per-word concreteness from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--manifest")
    p.add_argument("--captions-per-image", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--top", type=int, help="keep only the N most frequent corpus words")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_concreteness)

    p = sub.add_parser("correlate", help="Pearson correlation of two word-score tables")
    p.add_argument("table_a")
    p.add_argument("table_b")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_correlate)
    return root


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        return args.func(args)
    except VgnslError as exc:
        print(f"vgnsl: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        name = getattr(exc, "filename", None)
        detail = f"{exc.strerror}: {name}" if name else str(exc)
        print(f"vgnsl: error: {detail}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
