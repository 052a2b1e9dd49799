"""Reference session recommender over distilled item embeddings, all-ranking
HR/NDCG evaluation, the label-generation rate metric and ablation runs."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import stats
from torch import Tensor, nn

from .dataset import Corpus, Session, Splits
from .errors import ShapeError
from .nn_core import DTYPE, Adam, Linear, cross_entropy, derive_seed, iter_batches, make_generator, uniform_init
from .pipeline import EmbeddingTable, RecAdapter, TrainConfig, variant_embeddings

KS = (5, 10)


class SessionRecModel(nn.Module):
    """Items are fused from [ID | adapted visual | adapted textual]; a session is
    attention-pooled with the last item as query and scored against every item."""

    def __init__(self, n_items: int, d_rec: int, gen: torch.Generator, table: EmbeddingTable | None = None):
        super().__init__()
        self.d_rec = d_rec
        self.id_emb = nn.Parameter(uniform_init(d_rec, (n_items, d_rec), gen))
        self.register_buffer("id_mask", torch.ones(n_items, dtype=DTYPE))
        self.modal = table is not None
        if self.modal:
            if len(table.item_ids) != n_items:
                raise ShapeError("embedding table must cover every item")
            self.register_buffer("ev", torch.from_numpy(table.ev.copy()))
            self.register_buffer("et", torch.from_numpy(table.et.copy()))
            self.adapter = RecAdapter(table.d_sum, d_rec, gen)
            self.fuse = Linear(3 * d_rec, d_rec, gen)
        else:
            self.fuse = Linear(d_rec, d_rec, gen)
        self.attn_q = Linear(d_rec, d_rec, gen)
        self.attn_k = Linear(d_rec, d_rec, gen)
        self.out = Linear(2 * d_rec, d_rec, gen)

    def zero_id_rows(self, rows: Iterable[int]) -> None:
        rows = torch.as_tensor(list(rows), dtype=torch.long)
        self.id_mask[rows] = 0.0

    def item_reprs(self) -> Tensor:
        ids = self.id_emb * self.id_mask[:, None]
        if not self.modal:
            return self.fuse(ids)
        return self.fuse(torch.cat([ids, self.adapter(self.ev, "v"), self.adapter(self.et, "t")], dim=-1))

    def session_repr(self, reprs: Tensor, prefix: Tensor, lengths: Tensor) -> Tensor:
        """``prefix`` is (B, T) of item rows, left-aligned and padded with 0."""
        h = reprs[prefix]
        b = torch.arange(prefix.shape[0])
        last = h[b, lengths - 1]
        valid = torch.arange(prefix.shape[1])[None, :] < lengths[:, None]
        logits = (self.attn_k(h) * self.attn_q(last)[:, None, :]).sum(-1) / math.sqrt(self.d_rec)
        alpha = torch.softmax(logits.masked_fill(~valid, float("-inf")), dim=1)
        pooled = (alpha[..., None] * h).sum(1)
        return self.out(torch.cat([pooled, last], dim=-1))

    def forward(self, prefix: Tensor, lengths: Tensor) -> Tensor:
        reprs = self.item_reprs()
        return self.session_repr(reprs, prefix, lengths) @ reprs.T


def _pad(prefixes: Sequence[Sequence[int]]) -> tuple[Tensor, Tensor]:
    lengths = torch.tensor([len(p) for p in prefixes], dtype=torch.long)
    out = torch.zeros(len(prefixes), int(lengths.max()), dtype=torch.long)
    for i, p in enumerate(prefixes):
        out[i, : len(p)] = torch.as_tensor(p)
    return out, lengths


def sliding_windows(corpus: Corpus, sessions: Iterable[Session], max_prefix: int) -> tuple[list[list[int]], np.ndarray]:
    """(prefix rows, target row) for every position after the first of each session."""
    prefixes, targets = [], []
    for s in sessions:
        rows = corpus.rows(s.items).tolist()
        for t in range(1, len(rows)):
            prefixes.append(rows[max(0, t - max_prefix) : t])
            targets.append(rows[t])
    return prefixes, np.array(targets, dtype=np.int64)


def last_item_cases(corpus: Corpus, sessions: Iterable[Session], max_prefix: int) -> tuple[list[list[int]], np.ndarray]:
    prefixes, targets = [], []
    for s in sessions:
        rows = corpus.rows(s.items).tolist()
        prefixes.append(rows[:-1][-max_prefix:])
        targets.append(rows[-1])
    return prefixes, np.array(targets, dtype=np.int64)


@torch.no_grad()
def rec_score(model: SessionRecModel, session_prefix: Sequence[int]) -> np.ndarray:
    """Scores over all item rows for one prefix of item rows."""
    if len(session_prefix) == 0:
        raise ValueError("session prefix must be nonempty")
    prefix, lengths = _pad([list(session_prefix)])
    return model(prefix, lengths)[0].numpy()


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target; equal scores rank the lower item row first."""
    s_t = scores[np.arange(len(targets)), targets][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    better = (scores > s_t) | ((scores == s_t) & (cols < targets[:, None]))
    return better.sum(axis=1) + 1


def rank_metrics(ranks: np.ndarray, ks: Sequence[int] = KS) -> dict[str, float]:
    ranks = np.asarray(ranks)
    out = {}
    for k in ks:
        hit = ranks <= k
        out[f"hr@{k}"] = float(hit.mean()) if len(ranks) else 0.0
        out[f"ndcg@{k}"] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean()) if len(ranks) else 0.0
    return out


@dataclass
class EvalReport:
    hr5: float
    hr10: float
    ndcg5: float
    ndcg10: float
    n: int
    tag: str = "warm"
    gr_vskw: float | None = None
    gr_cat: float | None = None

    @classmethod
    def from_ranks(cls, ranks: np.ndarray, tag: str = "warm") -> "EvalReport":
        m = rank_metrics(ranks, KS)
        return cls(m["hr@5"], m["hr@10"], m["ndcg@5"], m["ndcg@10"], len(ranks), tag)

    def as_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def model_ranks(model: SessionRecModel, prefixes: list[list[int]], targets: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(targets), batch):
        p, lengths = _pad(prefixes[start : start + batch])
        scores = model(p, lengths).numpy()
        out.append(target_ranks(scores, targets[start : start + batch]))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def eval_topk(
    model: SessionRecModel, corpus: Corpus, sessions: Iterable[Session], max_prefix: int = 10, tag: str = "warm",
    target_filter: frozenset[int] | None = None,
) -> EvalReport:
    """All-ranking HR/NDCG on the last item of each session.

    With ``target_filter`` only sessions whose target id is in the set count.
    """
    sessions = [s for s in sessions if target_filter is None or s.target in target_filter]
    prefixes, targets = last_item_cases(corpus, sessions, max_prefix)
    return EvalReport.from_ranks(model_ranks(model, prefixes, targets), tag)


def gr_metric(pred_vk, true_vk, pred_cats, true_cats) -> tuple[float, float]:
    """Exact-match rate on the visual keyword and on the full category set."""
    if len(pred_vk) != len(true_vk) or len(pred_cats) != len(true_cats) or len(pred_vk) != len(pred_cats):
        raise ValueError("predictions and truths must be aligned")
    n = len(pred_vk)
    if n == 0:
        return 0.0, 0.0
    vk_hits = sum(int(p) == int(t) for p, t in zip(pred_vk, true_vk))
    cat_hits = sum(bool(p) and set(p) == set(t) for p, t in zip(pred_cats, true_cats))
    return vk_hits / n, cat_hits / n


def popularity_ranks(corpus: Corpus, train: Iterable[Session], test: Iterable[Session]) -> np.ndarray:
    counts = np.zeros(corpus.n_items)
    for s in train:
        np.add.at(counts, corpus.rows(s.items), 1)
    targets = np.array([corpus.row(s.target) for s in test], dtype=np.int64)
    return target_ranks(np.tile(counts, (len(targets), 1)), targets)


@dataclass
class RecTrainResult:
    model: SessionRecModel
    valid_curve: list[float]
    best_epoch: int


def rec_train(
    corpus: Corpus, splits: Splits, table: EmbeddingTable | None, cfg: TrainConfig, seed: int,
) -> RecTrainResult:
    """All-item cross-entropy on sliding windows of the training sessions; the
    state with the best validation HR@10 is kept. Embeddings stay frozen, the
    adapter trains with the recommender.

    Cold items are not in the training catalogue: they are left out of the
    training softmax and their ID rows stay zero.
    """
    if table is not None:
        table = table.aligned_to(corpus)
    model = SessionRecModel(corpus.n_items, cfg.d_rec, make_generator(derive_seed(seed, "rec", "init")), table)
    catalogue = torch.zeros(corpus.n_items, dtype=DTYPE)
    if splits.cold_items:
        cold_rows = corpus.rows(sorted(splits.cold_items))
        catalogue[torch.as_tensor(cold_rows)] = float("-inf")
    prefixes, targets = sliding_windows(corpus, corpus.sessions_for(splits.train), cfg.rec_max_prefix)
    v_prefixes, v_targets = last_item_cases(corpus, corpus.sessions_for(splits.valid), cfg.rec_max_prefix)
    rng = np.random.default_rng(derive_seed(seed, "rec", "batches"))
    warm_mask = (catalogue == 0).to(DTYPE)
    opt = Adam(dict(model.named_parameters()), lr=cfg.rec_lr)
    curve, best, best_state, best_epoch = [], -1.0, None, -1
    model.id_mask.copy_(warm_mask)
    for epoch in range(cfg.rec_epochs):
        for idx in iter_batches(len(targets), cfg.rec_batch, rng):
            p, lengths = _pad([prefixes[i] for i in idx])
            opt.step(cross_entropy(model(p, lengths) + catalogue, torch.from_numpy(targets[idx])))
        hr = rank_metrics(model_ranks(model, v_prefixes, v_targets))["hr@10"] if len(v_targets) else 0.0
        curve.append(hr)
        if hr > best:
            best, best_state, best_epoch = hr, copy.deepcopy(model.state_dict()), epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    return RecTrainResult(model, curve, best_epoch)


# -- ablations ----------------------------------------------------------------

def paired_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Paired t statistic and two-sided p-value for per-seed metrics."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    diff = a - b
    if len(diff) < 2 or np.all(diff == diff[0]):
        return (math.inf if diff.mean() > 0 else -math.inf if diff.mean() < 0 else 0.0), (0.0 if diff.mean() else 1.0)
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


def ablation_run(
    corpus: Corpus, splits: Splits, variants: Sequence[str], cfg: TrainConfig, seeds: Sequence[int],
    tag: str = "warm",
) -> dict:
    """Run every variant for every seed with shared upstream stages; per-seed rows
    plus a mean row and a paired t-test against ``full`` for each variant."""
    rows = []
    for seed in seeds:
        cache: dict = {}
        for v in variants:
            table = variant_embeddings(corpus, splits, cfg, seed, v, cache)
            res = rec_train(corpus, splits, table, cfg, derive_seed(seed, "rec-run"))
            test = corpus.sessions_for(splits.test)
            target_filter = splits.cold_items if splits.cold_items and tag == "cold" else None
            report = eval_topk(res.model, corpus, test, cfg.rec_max_prefix, tag, target_filter)
            rows.append({"variant": v, "seed": seed, "split": tag, **report.as_dict()})
    summary = {}
    for v in variants:
        vals = [r for r in rows if r["variant"] == v]
        summary[v] = {m: float(np.mean([r[m] for r in vals])) for m in ("hr5", "hr10", "ndcg5", "ndcg10")}
        if "full" in variants and v != "full":
            full = [r["hr10"] for r in rows if r["variant"] == "full"]
            t, p = paired_ttest(full, [r["hr10"] for r in vals])
            summary[v].update({"t_vs_full": t, "p_vs_full": p})
    return {"rows": rows, "summary": summary}
