"""Command-line entry point: ``ctrec <command> [--config FILE] [--set key=value ...]``.

Commands share one run directory (``out_dir``):

* ``ingest`` reads the TSV files, splits by time and builds base embeddings;
* ``train-tokenizer`` fits the user and item tokenizers;
* ``train-rec`` trains backbone and diffusion head jointly;
* ``evaluate`` writes metric records (one per metric, K and seed);
* ``reconstruct-bench`` compares the reconstruction models;
* ``make-synthetic`` writes a planted-preference dataset for trying things out.
"""

from __future__ import annotations

import argparse
import csv
import logging
import pickle
import sys
from pathlib import Path


from .bench import curve_records, reconstruct_bench
from .config import dump_config, load_config
from .data import build_base_embeddings, load_dataset, split_by_timepoint, write_dataset
from .exceptions import CheckpointError, CtrecError
from .recommender import ContinuousTokenRecommender
from .retrieval import aggregate_reports
from .synthetic import make_low_rank_embeddings, make_planted_interactions
from .tokenizer import SigmaVAETokenizer

logger = logging.getLogger("ctrec")

DATASET_FILE = "dataset.pkl"
USER_TOK, ITEM_TOK, REC = "user_tokenizer.ckpt", "item_tokenizer.ckpt", "recommender.ckpt"


def write_tsv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _run_dir(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_bundle(out: Path):
    path = out / DATASET_FILE
    if not path.exists():
        raise CheckpointError(f"{path} not found; run `ctrec ingest` first")
    with path.open("rb") as fh:
        return pickle.load(fh)


def _need(path: Path, command: str) -> Path:
    if not path.exists():
        raise CheckpointError(f"{path} not found; run `ctrec {command}` first")
    return path


def cmd_ingest(cfg, args):
    if not cfg.interactions:
        raise CtrecError("ingest needs `interactions` (set it in the config or with --set)")
    ds = load_dataset(cfg.interactions, cfg.catalog or None)
    split = split_by_timepoint(ds, cfg.q1, cfg.q2, cfg.max_len)
    base = build_base_embeddings(split, cfg.D, cfg.embeddings or None, cfg.embedding_mode)
    out = _run_dir(cfg)
    with (out / DATASET_FILE).open("wb") as fh:
        pickle.dump({"split": split, "base": base}, fh)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    print(f"users={len(split.users)} items={len(split.items)} train={len(split.train)} "
          f"valid={len(split.valid)} test={len(split.test)} dropped={split.dropped}")


def cmd_train_tokenizer(cfg, args):
    out = _run_dir(cfg)
    base = _load_bundle(out)["base"]
    params = cfg.tokenizer_params()
    item = SigmaVAETokenizer(**params).fit(base.item_vectors)
    user = SigmaVAETokenizer(**dict(params, random_state=cfg.seed + 7919)).fit(base.user_vectors)
    item.save(out / ITEM_TOK)
    user.save(out / USER_TOK)
    rows = [(name, "tokenizer", step, loss) for name, tok in (("item", item), ("user", user))
            for step, loss in enumerate(tok.loss_curve_)]
    write_tsv(out / "tokenizer_log.tsv", ("which", "phase", "step", "L_vae"), rows)
    print(f"item reconstruction={item.reconstruction_error(base.item_vectors):.6g} "
          f"user reconstruction={user.reconstruction_error(base.user_vectors):.6g}")


def cmd_train_rec(cfg, args):
    out = _run_dir(cfg)
    bundle = _load_bundle(out)
    user = SigmaVAETokenizer.load(_need(out / USER_TOK, "train-tokenizer"))
    item = SigmaVAETokenizer.load(_need(out / ITEM_TOK, "train-tokenizer"))
    rec = ContinuousTokenRecommender(**cfg.recommender_params()).fit(bundle["split"], bundle["base"], user, item)
    rec.save(out / REC)
    keys = ("phase", "step", "L_llm", "L_diff", "L_disp", "total", "wall", "config")
    write_tsv(out / "train_log.tsv", keys, [[r[k] for k in keys] for r in rec.train_log_])
    write_tsv(out / "valid_curve.tsv", ("step", "HR@10"), rec.valid_curve_)
    print(f"trained {len(rec.train_log_)} steps; best valid HR@10={getattr(rec, 'best_valid_hr_', float('nan')):.4f}")


def cmd_evaluate(cfg, args):
    out = _run_dir(cfg)
    split = _load_bundle(out)["split"]
    rec = ContinuousTokenRecommender.load(_need(out / REC, "train-rec"))
    seeds = [cfg.seed + 1000 + r for r in range(cfg.n_eval_seeds)]
    name = Path(cfg.interactions).stem if cfg.interactions else "dataset"
    reports = [rec.evaluate(split, args.split, seeds=[s]) for s in seeds]
    rows = [row for s, rep in zip(seeds, reports) for row in rep.records(name, args.split, s)]
    agg = aggregate_reports(reports)
    rows += agg.records(name, args.split, "mean")
    rows += [(name, args.split, k.split("@")[0], int(k.split("@")[1]), v, "std") for k, v in agg.std.items()]
    path = write_tsv(out / f"metrics_{args.split}.tsv", ("dataset", "split", "metric", "K", "value", "seed"), rows)
    if args.rankings:
        write_tsv(args.rankings, ("user_id", "item_id", "rank", "score"),
                  rec.rankings(split.examples(args.split), K=20, seed=seeds[0]))
    for key, val in agg.values.items():
        print(f"{key}\t{val:.6f}\t±{agg.std[key]:.6f}")
    print(f"wrote {path}")


def cmd_reconstruct_bench(cfg, args):
    out = _run_dir(cfg)
    if args.synthetic:
        X = make_low_rank_embeddings(2048, 64, 8, seed=cfg.seed)
    else:
        X = _load_bundle(out)["base"].item_vectors
    results = reconstruct_bench(X, steps=cfg.bench_steps, lr=cfg.bench_lr, seed=cfg.seed)
    write_tsv(out / "bench_curves.tsv", ("method", "step", "loss"), curve_records(results))
    write_tsv(out / "bench_final.tsv", ("method", "final_mse", "seconds"),
              [(r.method, r.final_mse, round(r.seconds, 2)) for r in results.values()])
    for r in results.values():
        print(f"{r.method}\t{r.final_mse:.6f}")


def cmd_make_synthetic(cfg, args):
    ds = make_planted_interactions(n_users=args.users, n_items=args.items, seed=cfg.seed)
    out = Path(args.dest)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out / "interactions.tsv", out / "catalog.tsv")
    print(f"wrote {len(ds.interactions)} interactions to {out}")


COMMANDS = {
    "ingest": cmd_ingest,
    "train-tokenizer": cmd_train_tokenizer,
    "train-rec": cmd_train_rec,
    "evaluate": cmd_evaluate,
    "reconstruct-bench": cmd_reconstruct_bench,
    "make-synthetic": cmd_make_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--out-dir", help="run directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="overrides seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ctrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("ingest", "train-tokenizer", "train-rec"):
        sub.add_parser(name, parents=[common])
    ev = sub.add_parser("evaluate", parents=[common])
    ev.add_argument("--split", choices=("valid", "test"), default="test")
    ev.add_argument("--rankings", help="also dump top-20 rankings to this TSV")
    rb = sub.add_parser("reconstruct-bench", parents=[common])
    rb.add_argument("--synthetic", action="store_true", help="use a seeded rank-8 set (2048 x 64)")
    ms = sub.add_parser("make-synthetic", parents=[common])
    ms.add_argument("dest")
    ms.add_argument("--users", type=int, default=600)
    ms.add_argument("--items", type=int, default=240)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.out_dir:
            overrides.append(f"out_dir={args.out_dir}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, args)
    except (CtrecError, OSError, KeyError, ValueError) as exc:
        print(f"ctrec {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
