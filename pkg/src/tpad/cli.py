"""Command-line entry point: one stage per sub-command, all outputs under
``<out>/<config-hash>-s<seed>/``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .config import RunConfig, load_config
from .dataset import (
    Corpus, MetaPair, Splits, cold_split, filter_corpus, load_corpus, save_corpus, split_sessions, synth_generate,
)
from .errors import StateError, TpadError
from .nn_core import derive_seed, load_checkpoint, load_module_tensors, make_generator, module_tensors, save_checkpoint
from .pipeline import (
    EmbeddingTable, distill, export_embeddings, load_knowledge_tower, load_transfer_tower, new_knowledge_tower,
    random_embeddings, save_distill, save_tower, stage1_train, stage2_t_train, training_meta_pairs, variant_config,
)
from .recsys import SessionRecModel, ablation_run, eval_topk, rec_train

log = logging.getLogger("tpad")

STAGES = ["gen-data", "prepare", "train-k0", "train-t", "train-k1", "export", "train-rec", "evaluate"]


class Run:
    """Resolved config plus the run directory and its artifact paths."""

    def __init__(self, cfg: RunConfig, out_root: Path):
        self.cfg = cfg
        self.hash = cfg.config_hash()
        self.dir = out_root / f"{self.hash}-s{cfg.seed}"
        self.dir.mkdir(parents=True, exist_ok=True)

    def v(self, name: str) -> str:
        """Per-variant artifact name, e.g. ``k1.full.json``."""
        stem, dot, ext = name.partition(".")
        return f"{stem}.{self.cfg.variant}{dot}{ext}"

    def path(self, name: str) -> Path:
        return self.dir / name

    def require(self, stage: str, *names: str) -> None:
        missing = [n for n in names if not self.path(n).exists()]
        if missing:
            raise StateError(f"missing {', '.join(missing)} in {self.dir}; run '{stage}' first")

    def header(self) -> dict:
        return {"config_hash": self.hash, "seed": self.cfg.seed, "variant": self.cfg.variant}

    def write_json(self, name: str, payload: dict) -> None:
        text = json.dumps({**self.header(), **payload}, sort_keys=True, indent=1)
        self.path(name).write_text(text + "\n")

    def write_csv(self, name: str, rows: list[dict]) -> None:
        keys: list[str] = []
        for r in rows:
            keys += [k for k in r if k not in keys]
        lines = [f"# config_hash={self.hash} seed={self.cfg.seed} variant={self.cfg.variant}", ",".join(keys)]
        for r in rows:
            lines.append(",".join(_csv_cell(r.get(k)) for k in keys))
        self.path(name).write_text("\n".join(lines) + "\n")

    # -- loaders for stage artifacts --

    def corpus(self) -> Corpus:
        self.require("prepare", "corpus_items.jsonl", "corpus_sessions.jsonl", "splits.json")
        return load_corpus(self.path("corpus_items.jsonl"), self.path("corpus_sessions.jsonl"))

    def splits(self) -> Splits:
        self.require("prepare", "splits.json")
        d = json.loads(self.path("splits.json").read_text())
        return Splits(tuple(d["train"]), tuple(d["valid"]), tuple(d["test"]), frozenset(d["cold_items"]))

    def meta_pairs(self) -> list[MetaPair]:
        self.require("prepare", "meta_pairs.jsonl")
        pairs = []
        with open(self.path("meta_pairs.jsonl")) as fh:
            next(fh)
            for line in fh:
                r = json.loads(line)
                pairs.append(MetaPair(r["order"], tuple(r["query"]), r["target"]))
        return pairs


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v).replace(",", ";")


# -- stages -----------------------------------------------------------------


def cmd_gen_data(run: Run) -> None:
    rc = run.cfg.run
    if rc.items_path:
        corpus = load_corpus(rc.items_path, rc.sessions_path)
    else:
        corpus = synth_generate(run.cfg.synth, derive_seed(run.cfg.seed, "synth"))
    save_corpus(corpus, run.path("raw_items.jsonl"), run.path("raw_sessions.jsonl"))
    log.info("corpus: %d items, %d sessions", corpus.n_items, len(corpus.sessions))


def cmd_prepare(run: Run) -> None:
    run.require("gen-data", "raw_items.jsonl", "raw_sessions.jsonl")
    rc = run.cfg.run
    raw = load_corpus(run.path("raw_items.jsonl"), run.path("raw_sessions.jsonl"))
    corpus = filter_corpus(raw, rc.min_item_count, rc.min_session_len)
    seed = derive_seed(run.cfg.seed, "split")
    if rc.cold_frac > 0:
        splits = cold_split(corpus, rc.cold_frac, seed, rc.split_ratios)
    else:
        splits = split_sessions(corpus, rc.split_ratios, seed)
    save_corpus(corpus, run.path("corpus_items.jsonl"), run.path("corpus_sessions.jsonl"))
    run.write_json("splits.json", {"train": list(splits.train), "valid": list(splits.valid),
                                   "test": list(splits.test), "cold_items": sorted(splits.cold_items)})
    pairs = training_meta_pairs(corpus, splits, run.cfg.train.kappa_max)
    with open(run.path("meta_pairs.jsonl"), "w") as fh:
        fh.write(json.dumps({"header": True, **run.header()}) + "\n")
        for p in pairs:
            fh.write(json.dumps({"order": p.order, "query": list(p.query), "target": p.target}) + "\n")
    log.info("prepared: %d items, %d/%d/%d sessions, %d meta pairs", corpus.n_items,
             len(splits.train), len(splits.valid), len(splits.test), len(pairs))


def cmd_train_k0(run: Run) -> None:
    corpus = run.corpus()
    tower, res = stage1_train(corpus, run.cfg.train, run.cfg.seed)
    save_tower(run.path("k0.json"), tower, "K0", run.header())
    run.write_csv("k0_log.csv", res.log)


def cmd_train_t(run: Run) -> None:
    corpus = run.corpus()
    tower, res = stage2_t_train(run.meta_pairs(), corpus, variant_config(run.cfg.train, run.cfg.variant), run.cfg.seed)
    save_tower(run.path(run.v("t.json")), tower, "T", run.header())
    run.write_csv(run.v("t_log.csv"), res.log)


def cmd_train_k1(run: Run) -> None:
    corpus = run.corpus()
    run.require("train-k0", "k0.json")
    run.require("train-t", run.v("t.json"))
    cfg = variant_config(run.cfg.train, run.cfg.variant)
    k0 = load_knowledge_tower(run.path("k0.json"), corpus, cfg)
    t_tower = load_transfer_tower(run.path(run.v("t.json")), corpus, cfg)
    res = distill(corpus, run.meta_pairs(), cfg, run.cfg.seed, k0, t_tower)
    save_distill(run.path(run.v("k1.json")), res, run.header())
    run.write_csv(run.v("k1_log.csv"), res.result.log)
    run.write_json(run.v("k1_readings.json"), {"readings": res.result.readings})


def cmd_export(run: Run) -> None:
    corpus = run.corpus()
    variant, cfg = run.cfg.variant, run.cfg.train
    if variant == "id-only":
        run.write_json(run.v("embeddings_none.json"), {"embeddings": None})
        return
    if variant == "random":
        table = random_embeddings(corpus, cfg.d_sum, derive_seed(run.cfg.seed, "random-embeddings"))
    elif variant == "tpad-na":
        run.require("train-k0", "k0.json")
        table = export_embeddings(load_knowledge_tower(run.path("k0.json"), corpus, cfg), corpus, "K0")
    else:
        run.require("train-k1", run.v("k1.json"))
        tensors, _ = load_checkpoint(run.path(run.v("k1.json")))
        tower = new_knowledge_tower(corpus, cfg, 0)
        load_module_tensors(tensors, tower=tower)
        table = export_embeddings(tower, corpus, "K1")
    table.save(run.path(run.v("embeddings.jsonl")), run.hash)


def _embedding_table(run: Run) -> EmbeddingTable | None:
    if run.cfg.variant == "id-only":
        run.require("export", run.v("embeddings_none.json"))
        return None
    run.require("export", run.v("embeddings.jsonl"))
    return EmbeddingTable.load(run.path(run.v("embeddings.jsonl")))


def cmd_train_rec(run: Run) -> None:
    corpus, splits = run.corpus(), run.splits()
    table = _embedding_table(run)
    res = rec_train(corpus, splits, table, run.cfg.train, derive_seed(run.cfg.seed, "rec-run"))
    save_checkpoint(run.path(run.v("rec.json")), module_tensors(model=res.model),
                    {**run.header(), "best_epoch": res.best_epoch})
    run.write_csv(run.v("rec_log.csv"), [{"epoch": e, "valid_hr10": hr} for e, hr in enumerate(res.valid_curve)])


def cmd_evaluate(run: Run) -> dict:
    corpus, splits = run.corpus(), run.splits()
    run.require("train-rec", run.v("rec.json"))
    table = _embedding_table(run)
    if table is not None:
        table = table.aligned_to(corpus)
    model = SessionRecModel(corpus.n_items, run.cfg.train.d_rec, make_generator(0), table)
    tensors, _ = load_checkpoint(run.path(run.v("rec.json")))
    load_module_tensors(tensors, model=model)
    test = corpus.sessions_for(splits.test)
    reports = []
    if splits.cold_items:
        warm_targets = frozenset(int(i) for i in corpus.item_ids) - splits.cold_items
        reports.append(eval_topk(model, corpus, test, run.cfg.train.rec_max_prefix, "warm", warm_targets))
        reports.append(eval_topk(model, corpus, test, run.cfg.train.rec_max_prefix, "cold", splits.cold_items))
    else:
        reports.append(eval_topk(model, corpus, test, run.cfg.train.rec_max_prefix, "warm"))
    rows = [{"variant": run.cfg.variant, "seed": run.cfg.seed, "split": r.tag, **r.as_dict()} for r in reports]
    metrics = {"reports": rows}
    run.write_json(run.v("metrics.json"), metrics)
    run.write_csv(run.v("metrics.csv"), rows)
    return metrics


def cmd_ablate(run: Run) -> dict:
    corpus, splits = run.corpus(), run.splits()
    rc = run.cfg.run
    seeds = [run.cfg.seed + i for i in range(rc.ablate_seeds)]
    tag = "cold" if splits.cold_items else "warm"
    out = ablation_run(corpus, splits, list(rc.ablate_variants), run.cfg.train, seeds, tag)
    run.write_json("ablation.json", out)
    run.write_csv("ablation.csv", out["rows"])
    return out


def cmd_run_all(run: Run) -> None:
    for stage in STAGES:
        log.info("stage %s", stage)
        COMMANDS[stage](run)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "prepare": cmd_prepare,
    "train-k0": cmd_train_k0,
    "train-t": cmd_train_t,
    "train-k1": cmd_train_k1,
    "export": cmd_export,
    "train-rec": cmd_train_rec,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "run-all": cmd_run_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpad", description=__doc__)
    parser.add_argument("command", choices=[*COMMANDS, "show-config"])
    parser.add_argument("--config", type=Path, help="key = value file listing every config key")
    parser.add_argument("--seed", type=int, help="overrides the master seed")
    parser.add_argument("--out", type=Path, help="output root (default: $TPAD_OUT or ./runs)")
    parser.add_argument("--variant", help="embedding variant for export/train-rec/evaluate")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise TpadError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.variant is not None:
        overrides["variant"] = args.variant
    return cfg.with_overrides(overrides) if overrides else cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            sys.stdout.write(cfg.to_text())
            return 0
        out_root = args.out or Path(os.environ.get("TPAD_OUT", "runs"))
        run = Run(cfg, out_root)
        run.path("config.txt").write_text(f"# config_hash={run.hash}\n" + cfg.to_text())
        result = COMMANDS[args.command](run)
    except TpadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if isinstance(result, dict):
        print(json.dumps(result.get("summary", result), sort_keys=True, indent=1))
    print(run.dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
