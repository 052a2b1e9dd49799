"""Stage orchestration: knowledge tower (K0), transfer tower (T), distilled
knowledge tower (K1), embedding export and the recommendation adapter."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .dataset import Corpus, MetaPair, Splits, extract_meta_pairs, filter_meta_pairs
from .errors import ShapeError, StateError
from .mi_estimators import (
    ClubEstimator, MineEstimator, club_estimate, club_fit_step, derangement, mine_estimate, mine_fit_step,
)
from .nn_core import (
    DTYPE, Adam, Linear, derive_seed, iter_batches, load_checkpoint, load_module_tensors, make_generator,
    module_tensors, named_params, save_checkpoint,
)
from .towers import (
    ContrastiveBatcher, KnowledgeTower, TransferTower, gen_loss, intra_cl_loss, item_features, item_labels,
    k_tower_forward, predict_labels, query_features, t_tower_forward,
)
from .tpa import MODALITIES, PatternSummary, ProjectorSet, build_pattern_summaries, decouple, stack_pooled

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    d_h: int = 128
    d_sum: int = 64
    d_lat: int = 32
    activation: str = "tanh"
    warmup_frac: float = 0.05
    # knowledge acquisition
    k0_epochs: int = 15
    k0_batch: int = 64
    k0_lr: float = 3e-3
    # transfer tower
    t_epochs: int = 8
    t_batch_targets: int = 32
    t_lr: float = 3e-3
    mu: float = 0.005
    tau: float = 0.1
    kappa_max: int = 2
    # transition distillation
    k1_epochs: int = 100
    k1_batch: int = 64
    k1_lr: float = 3e-3
    gen_weight: float = 1.0
    gamma1: float = 0.001
    gamma2: float = 10.0
    gamma3: float = 0.5
    est_hidden: int = 64
    est_lr: float = 1e-3
    est_warmup_steps: int = 200
    heldout_frac: float = 0.2
    rounds: int = 1
    # downstream recommender
    d_rec: int = 100
    rec_epochs: int = 8
    rec_batch: int = 50
    rec_lr: float = 1e-3
    rec_max_prefix: int = 10

    def __post_init__(self):
        for name in ("mu", "gamma1", "gamma2", "gamma3", "gen_weight", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.kappa_max not in (1, 2):
            raise ValueError("kappa_max must be 1 or 2")


def _tower_args(corpus: Corpus, cfg: TrainConfig) -> tuple:
    return (corpus.d_in, cfg.d_h, cfg.d_sum, corpus.n_vk, corpus.n_cat, corpus.k_cat)


def new_knowledge_tower(corpus: Corpus, cfg: TrainConfig, seed: int) -> KnowledgeTower:
    return KnowledgeTower(*_tower_args(corpus, cfg), make_generator(seed), cfg.activation)


def new_transfer_tower(corpus: Corpus, cfg: TrainConfig, seed: int) -> TransferTower:
    return TransferTower(*_tower_args(corpus, cfg), make_generator(seed), cfg.activation)


@torch.no_grad()
def label_accuracy(tower: KnowledgeTower, corpus: Corpus, rows: np.ndarray | None = None) -> tuple[float, float]:
    """Exact-match rates (visual keyword, category set) of the tower's label predictions."""
    from .recsys import gr_metric

    rows = np.arange(corpus.n_items) if rows is None else rows
    vk, cats = predict_labels(k_tower_forward(tower, *item_features(corpus, rows)))
    return gr_metric(vk, corpus.vk[rows], cats, [frozenset(c) for c in corpus.cats[rows].tolist()])


# -- stage 1 ------------------------------------------------------------------


@dataclass
class StageResult:
    log: list[dict] = field(default_factory=list)
    readings: dict[str, float] = field(default_factory=dict)


def train_knowledge_gen(
    tower: KnowledgeTower, corpus: Corpus, rows: np.ndarray, epochs: int, batch: int, lr: float,
    warmup_frac: float, seed: int, stage: str, result: StageResult,
) -> KnowledgeTower:
    """Plain label-classification training of a knowledge tower on ``rows``."""
    rng = np.random.default_rng(seed)
    steps = epochs * -(-len(rows) // batch)
    opt = Adam(dict(tower.named_parameters()), lr=lr, total_steps=steps, warmup_frac=warmup_frac)
    step = 0
    for epoch in range(epochs):
        for idx in iter_batches(len(rows), batch, rng):
            r = rows[idx]
            out = k_tower_forward(tower, *item_features(corpus, r))
            loss = gen_loss(out.vk_logits, out.cat_logits, *item_labels(corpus, r))
            opt.step(loss)
            step += 1
        gr_vk, gr_cat = label_accuracy(tower, corpus, rows)
        result.log.append({"stage": stage, "epoch": epoch, "step": step, "gen": float(loss.detach()),
                           "gr_vskw": gr_vk, "gr_cat": gr_cat})
    return tower


def stage1_train(corpus: Corpus, cfg: TrainConfig, seed: int) -> tuple[KnowledgeTower, StageResult]:
    """Knowledge acquisition: fit the knowledge tower on every item's labels."""
    tower = new_knowledge_tower(corpus, cfg, derive_seed(seed, "k0", "init"))
    result = StageResult()
    train_knowledge_gen(
        tower, corpus, np.arange(corpus.n_items), cfg.k0_epochs, cfg.k0_batch, cfg.k0_lr,
        cfg.warmup_frac, derive_seed(seed, "k0", "batches"), "K0", result,
    )
    tower.requires_grad_(False)
    return tower, result


# -- stage 2a ---------------------------------------------------------------------


def stage2_t_train(
    meta_pairs: Sequence[MetaPair], corpus: Corpus, cfg: TrainConfig, seed: int
) -> tuple[TransferTower, StageResult]:
    """Transfer tower: label prediction of the meta target plus intra-order contrast."""
    orders = [k for k in range(1, cfg.kappa_max + 1) if any(p.order == k for p in meta_pairs)]
    if not orders:
        raise StateError("no meta pairs survived filtering")
    tower = new_transfer_tower(corpus, cfg, derive_seed(seed, "t", "init"))
    batchers = {k: ContrastiveBatcher([p for p in meta_pairs if p.order == k], cfg.t_batch_targets,
                                      derive_seed(seed, "t", "batches", k)) for k in orders}
    contrastive = all(b.targets for b in batchers.values())
    if not contrastive:
        log.warning("no meta target has two pairs; intra-order contrast disabled")
    rng = np.random.default_rng(derive_seed(seed, "t", "fallback"))
    by_order = {k: [p for p in meta_pairs if p.order == k] for k in orders}

    def epoch_batches(e: int) -> list[list[MetaPair]]:
        if contrastive:
            per = [batchers[k].epoch(e) for k in orders]
        else:
            size = 2 * cfg.t_batch_targets
            per = [[[by_order[k][i] for i in idx] for idx in iter_batches(len(by_order[k]), size, rng)]
                   for k in orders]
        out = []
        for i in range(max(len(b) for b in per)):
            out += [b[i] for b in per if i < len(b)]
        return out

    plan = [epoch_batches(e) for e in range(cfg.t_epochs)]
    opt = Adam(dict(tower.named_parameters()), lr=cfg.t_lr, total_steps=sum(map(len, plan)),
               warmup_frac=cfg.warmup_frac)
    result = StageResult()
    step = 0
    for epoch, batches in enumerate(plan):
        for batch in batches:
            order = batch[0].order
            out = t_tower_forward(tower, *query_features(corpus, batch), order)
            targets = corpus.rows([p.target for p in batch])
            lg = gen_loss(out.vk_logits, out.cat_logits, *item_labels(corpus, targets))
            loss = lg
            lc = torch.zeros(())
            if contrastive and cfg.mu > 0:
                lc = intra_cl_loss(out.e_v, out.e_t, [p.target for p in batch], cfg.tau)
                loss = lg + cfg.mu * lc
            opt.step(loss)
            step += 1
            result.log.append({"stage": "T", "epoch": epoch, "step": step, "order": order,
                               "gen": float(lg.detach()), "intra_cl": float(lc.detach()), "loss": float(loss.detach())})
    tower.requires_grad_(False)
    return tower, result


# -- stage 2b ---------------------------------------------------------------------


@dataclass
class Estimators:
    club: dict[str, ClubEstimator]
    mine_h: dict[str, MineEstimator]
    mine_s: dict[str, MineEstimator]

    @classmethod
    def create(cls, cfg: TrainConfig, seed: int) -> "Estimators":
        d, h = cfg.d_lat, cfg.est_hidden

        def gen(*tag):
            return make_generator(derive_seed(seed, "est", *tag))

        return cls(
            club={o: ClubEstimator(d, d, h, gen("club", o), cfg.est_lr) for o in MODALITIES},
            mine_h={o: MineEstimator(d, d, h, gen("mine_h", o), cfg.est_lr) for o in MODALITIES},
            mine_s={o: MineEstimator(d, d, h, gen("mine_s", o), cfg.est_lr) for o in MODALITIES},
        )

    def modules(self) -> dict[str, nn.Module]:
        out = {}
        for kind in ("club", "mine_h", "mine_s"):
            for o, est in getattr(self, kind).items():
                out[f"{kind}_{o}"] = est
        return out


@dataclass
class DistillState:
    """Frozen inputs to transition distillation."""

    corpus: Corpus
    k0: KnowledgeTower
    summaries: dict[tuple[int, int, str], PatternSummary]
    e0: dict[str, Tensor]  # zero-order summaries for every corpus row

    @classmethod
    def build(cls, corpus: Corpus, k0: KnowledgeTower, t_tower: TransferTower, meta_pairs: Sequence[MetaPair]):
        with torch.no_grad():
            out = k_tower_forward(k0, *item_features(corpus, np.arange(corpus.n_items)))
        return cls(corpus, k0, build_pattern_summaries(t_tower, meta_pairs, corpus), {"v": out.e_v, "t": out.e_t})

    def orders_for(self, item_id: int) -> list[int]:
        return [k for k in (1, 2) if (item_id, k, "v") in self.summaries]


def _alignment_terms(
    tower: KnowledgeTower, proj: ProjectorSet, est: Estimators, state: DistillState, rows: np.ndarray,
    rng: np.random.Generator | None, fit: bool,
) -> dict[str, Tensor]:
    """All loss components for one batch of item rows.

    When ``fit`` is set, every estimator first takes one step on detached
    samples; the estimates entering the loss use the updated estimators.
    Derangements come from ``rng`` (or a fixed cyclic shift when ``rng`` is None).
    """
    corpus = state.corpus

    def shuffle(n):
        return torch.as_tensor(derangement(n, rng) if rng is not None else np.roll(np.arange(n), 1))

    out = k_tower_forward(tower, *item_features(corpus, rows))
    e = {"v": out.e_v, "t": out.e_t}
    z, w = {}, {}
    for o in MODALITIES:
        dec = decouple(proj, e[o], o)
        z[o], w[o] = dec.z, dec.w

    # (estimator, a, b, b_marginal) triples for both MINE bounds
    h_terms, s_terms = [], []
    ids = corpus.item_ids[rows]
    for order in (1, 2):
        keep = [i for i, t in enumerate(ids) if (int(t), order, "v") in state.summaries]
        if len(keep) < 2:
            continue
        perm = shuffle(len(keep))
        keep_t = torch.as_tensor(keep)
        for o in MODALITIES:
            r = proj.project("T", o, stack_pooled(state.summaries, ids[keep], order, o))
            h_terms.append((est.mine_h[o], z[o][keep_t], r, r[perm]))
    perm = shuffle(len(rows))
    for o in MODALITIES:
        ebar = proj.project("K", o, state.e0[o][torch.as_tensor(rows)])
        s_terms.append((est.mine_s[o], w[o], ebar, ebar[perm]))

    if fit:
        for o in MODALITIES:
            club_fit_step(est.club[o], z[o], w[o])
        for mine, a, b, bm in h_terms + s_terms:
            mine_fit_step(mine, a, b, bm)

    return {
        "gen": gen_loss(out.vk_logits, out.cat_logits, *item_labels(corpus, rows)),
        "miu": sum(club_estimate(est.club[o], z[o], w[o]) for o in MODALITIES),
        "mil_h": sum(mine_estimate(*t) for t in h_terms),
        "mil_s": sum(mine_estimate(*t) for t in s_terms),
    }


def k1_objective(terms: dict[str, Tensor], cfg: TrainConfig) -> Tensor:
    """Minimised form: the CLUB term is added, both MINE bounds are subtracted."""
    return (cfg.gen_weight * terms["gen"] + cfg.gamma1 * terms["miu"]
            - cfg.gamma2 * terms["mil_h"] - cfg.gamma3 * terms["mil_s"])


@torch.no_grad()
def _latents(tower: KnowledgeTower, proj: ProjectorSet, state: DistillState, rows: np.ndarray):
    out = k_tower_forward(tower, *item_features(state.corpus, rows))
    z, w = {}, {}
    for o, e in (("v", out.e_v), ("t", out.e_t)):
        dec = decouple(proj, e, o)
        z[o], w[o] = dec.z, dec.w
    return z, w


def _pattern_pairs(proj: ProjectorSet, state: DistillState, rows: np.ndarray, z: dict[str, Tensor]):
    """(z, r) aligned pairs for every order available on ``rows``."""
    ids = state.corpus.item_ids[rows]
    pairs = []
    with torch.no_grad():
        for order in (1, 2):
            keep = [i for i, t in enumerate(ids) if (int(t), order, "v") in state.summaries]
            if len(keep) < 2:
                continue
            k = torch.as_tensor(keep)
            for o in MODALITIES:
                r = proj.project("T", o, stack_pooled(state.summaries, ids[keep], order, o))
                pairs.append((o, z[o][k], r))
    return pairs


def _warm_estimators(
    tower, proj, est: Estimators, state: DistillState, rows: np.ndarray, steps: int, batch: int,
    rng: np.random.Generator,
) -> None:
    """Fit every estimator on detached latents of the current towers."""
    z, w = _latents(tower, proj, state, rows)
    pairs = _pattern_pairs(proj, state, rows, z)
    with torch.no_grad():
        ebar = {o: proj.project("K", o, state.e0[o][torch.as_tensor(rows)]) for o in MODALITIES}
    n = len(rows)
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch, n), replace=False)
        it = torch.as_tensor(idx)
        perm = derangement(len(idx), rng)
        for o in MODALITIES:
            club_fit_step(est.club[o], z[o][it], w[o][it])
            mine_fit_step(est.mine_s[o], w[o][it], ebar[o][it], ebar[o][it][perm])
        for o, zk, r in pairs:
            j = rng.choice(zk.shape[0], size=min(batch, zk.shape[0]), replace=False)
            jt = torch.as_tensor(j)
            pj = torch.as_tensor(j[derangement(len(j), rng)])
            mine_fit_step(est.mine_h[o], zk[jt], r[jt], r[pj])


@torch.no_grad()
def alignment_readings(tower, proj, est: Estimators, state: DistillState, rows: np.ndarray, seed: int) -> dict[str, float]:
    """CLUB reading of I(z; w) and MINE reading of I(z; r) on ``rows``, summed over modalities/orders."""
    rng = np.random.default_rng(seed)
    z, w = _latents(tower, proj, state, rows)
    club = sum(float(club_estimate(est.club[o], z[o], w[o])) for o in MODALITIES)
    mine = 0.0
    for o, zk, r in _pattern_pairs(proj, state, rows, z):
        perm = torch.as_tensor(derangement(zk.shape[0], rng))
        mine += float(mine_estimate(est.mine_h[o], zk, r, r[perm]))
    return {"club_zw": club, "mine_zr": mine}


@dataclass
class DistillResult:
    tower: KnowledgeTower
    projectors: ProjectorSet
    estimators: Estimators
    train_rows: np.ndarray
    heldout_rows: np.ndarray
    result: StageResult


def meta_target_rows(corpus: Corpus, meta_pairs: Sequence[MetaPair]) -> np.ndarray:
    return np.sort(corpus.rows(sorted({p.target for p in meta_pairs})))


def stage2_k_train(
    k0: KnowledgeTower | None, t_tower: TransferTower | None, meta_pairs: Sequence[MetaPair],
    corpus: Corpus, cfg: TrainConfig, seed: int,
    projectors: ProjectorSet | None = None, estimators: Estimators | None = None,
    init: KnowledgeTower | None = None,
) -> DistillResult:
    """Transition distillation into a copy of K0 (or ``init``), trained on the
    meta-target items. Zero-order embeddings always come from K0."""
    if k0 is None:
        raise StateError("stage2_k_train requires a K0 checkpoint (run train-k0)")
    if t_tower is None:
        raise StateError("stage2_k_train requires a T checkpoint (run train-t)")
    state = DistillState.build(corpus, k0, t_tower, meta_pairs)
    tower = copy.deepcopy(init if init is not None else k0).requires_grad_(True)
    proj = projectors or ProjectorSet(cfg.d_sum, cfg.d_lat, make_generator(derive_seed(seed, "proj")),
                                      activation=cfg.activation)
    est = estimators or Estimators.create(cfg, seed)

    rows = meta_target_rows(corpus, meta_pairs)
    split_rng = np.random.default_rng(derive_seed(seed, "k1", "heldout"))
    n_held = int(round(cfg.heldout_frac * len(rows)))
    perm = split_rng.permutation(len(rows))
    held, train = np.sort(rows[perm[:n_held]]), np.sort(rows[perm[n_held:]])

    est_rng = np.random.default_rng(derive_seed(seed, "k1", "estimators"))
    batch_rng = np.random.default_rng(derive_seed(seed, "k1", "batches"))
    read_seed = derive_seed(seed, "k1", "readings")
    result = StageResult()

    _warm_estimators(tower, proj, est, state, train, cfg.est_warmup_steps, cfg.k1_batch, est_rng)
    if len(held) >= 2:
        start = alignment_readings(tower, proj, est, state, held, read_seed)
        result.readings.update({f"{k}_start": v for k, v in start.items()})

    steps = cfg.k1_epochs * -(-len(train) // cfg.k1_batch)
    params = named_params(("tower", tower), ("proj", proj))
    opt = Adam(params, lr=cfg.k1_lr, total_steps=steps, warmup_frac=cfg.warmup_frac)
    step = 0
    for epoch in range(cfg.k1_epochs):
        for idx in iter_batches(len(train), cfg.k1_batch, batch_rng):
            if len(idx) < 2:
                continue
            terms = _alignment_terms(tower, proj, est, state, train[idx], est_rng, fit=True)
            loss = k1_objective(terms, cfg)
            opt.step(loss)
            step += 1
            result.log.append({"stage": "K1", "epoch": epoch, "step": step, "loss": float(loss.detach()),
                               **{k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}})

    _warm_estimators(tower, proj, est, state, train, cfg.est_warmup_steps, cfg.k1_batch, est_rng)
    if len(held) >= 2:
        end = alignment_readings(tower, proj, est, state, held, read_seed)
        result.readings.update({f"{k}_end": v for k, v in end.items()})
    tower.requires_grad_(False)
    return DistillResult(tower, proj, est, train, held, result)


# -- export -----------------------------------------------------------------


@dataclass
class EmbeddingTable:
    item_ids: np.ndarray
    ev: np.ndarray
    et: np.ndarray
    stage: str

    @property
    def d_sum(self) -> int:
        return self.ev.shape[1]

    def save(self, path: str | Path, config_hash: str = "") -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"header": True, "stage": self.stage, "d_sum": self.d_sum,
                                 "n_items": len(self.item_ids), "config_hash": config_hash}) + "\n")
            for i, v, t in zip(self.item_ids, self.ev, self.et):
                fh.write(json.dumps({"id": int(i), "ev": v.tolist(), "et": t.tolist()}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        with open(path) as fh:
            header = json.loads(fh.readline())
            recs = [json.loads(line) for line in fh if line.strip()]
        d = header["d_sum"]
        return cls(
            np.array([r["id"] for r in recs], dtype=np.int64),
            np.array([r["ev"] for r in recs], dtype=np.float64).reshape(-1, d),
            np.array([r["et"] for r in recs], dtype=np.float64).reshape(-1, d),
            header["stage"],
        )

    def aligned_to(self, corpus: Corpus) -> "EmbeddingTable":
        """Rows reordered to match ``corpus`` item rows."""
        index = {int(i): r for r, i in enumerate(self.item_ids)}
        try:
            rows = np.array([index[int(i)] for i in corpus.item_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"embedding table lacks item {exc.args[0]}") from None
        return EmbeddingTable(corpus.item_ids.copy(), self.ev[rows], self.et[rows], self.stage)


@torch.no_grad()
def export_embeddings(tower: KnowledgeTower, corpus: Corpus, stage: str, batch: int = 1024) -> EmbeddingTable:
    """One forward pass per item."""
    ev, et = [], []
    for start in range(0, corpus.n_items, batch):
        rows = np.arange(start, min(start + batch, corpus.n_items))
        out = k_tower_forward(tower, *item_features(corpus, rows))
        ev.append(out.e_v.numpy())
        et.append(out.e_t.numpy())
    d = tower.d_sum
    return EmbeddingTable(corpus.item_ids.copy(), np.concatenate(ev).reshape(-1, d),
                          np.concatenate(et).reshape(-1, d), stage)


def random_embeddings(corpus: Corpus, d_sum: int, seed: int) -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    return EmbeddingTable(corpus.item_ids.copy(), rng.normal(size=(corpus.n_items, d_sum)),
                          rng.normal(size=(corpus.n_items, d_sum)), "random")


class RecAdapter(nn.Module):
    """Per modality: W2 (W1 e + b1) + b2, from summary space to recommendation space."""

    def __init__(self, d_sum: int, d_rec: int, gen: torch.Generator):
        super().__init__()
        self.first = nn.ModuleDict({o: Linear(d_sum, d_rec, gen) for o in MODALITIES})
        self.second = nn.ModuleDict({o: Linear(d_rec, d_rec, gen) for o in MODALITIES})

    def forward(self, e: Tensor, o: str) -> Tensor:
        return self.second[o](self.first[o](e))


def adapt(adapter: RecAdapter, table: EmbeddingTable) -> dict[str, Tensor]:
    if table.d_sum != adapter.first["v"].d_in:
        raise ShapeError(f"table dim {table.d_sum} does not match adapter input {adapter.first['v'].d_in}")
    return {"v": adapter(torch.from_numpy(table.ev), "v"), "t": adapter(torch.from_numpy(table.et), "t")}


# -- persistence ----------------------------------------------------------------


def save_tower(path: str | Path, tower: nn.Module, stage: str, meta: dict | None = None) -> None:
    save_checkpoint(path, module_tensors(tower=tower), {"stage": stage, **(meta or {})})


def load_knowledge_tower(path: str | Path, corpus: Corpus, cfg: TrainConfig) -> KnowledgeTower:
    tensors, _ = load_checkpoint(path)
    tower = new_knowledge_tower(corpus, cfg, 0)
    load_module_tensors(tensors, tower=tower)
    return tower.requires_grad_(False)


def load_transfer_tower(path: str | Path, corpus: Corpus, cfg: TrainConfig) -> TransferTower:
    tensors, _ = load_checkpoint(path)
    tower = new_transfer_tower(corpus, cfg, 0)
    load_module_tensors(tensors, tower=tower)
    return tower.requires_grad_(False)


def save_distill(path: str | Path, res: DistillResult, meta: dict | None = None) -> None:
    save_checkpoint(
        path,
        module_tensors(tower=res.tower, proj=res.projectors, **res.estimators.modules()),
        {"stage": "K1", "readings": res.result.readings, **(meta or {})},
    )


def write_log(path: str | Path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


# -- end-to-end ---------------------------------------------------------------

VARIANTS = {
    "full": {},
    "tpad-na": {},
    "wo-mil-h": {"gamma2": 0.0},
    "wo-mil-s": {"gamma3": 0.0},
    "wo-miu": {"gamma1": 0.0},
    "wo-gen-k": {"gen_weight": 0.0},
    "wo-intracl": {"mu": 0.0},
    "random": {},
    "id-only": {},
}


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return replace(cfg, **VARIANTS[variant])


def training_meta_pairs(corpus: Corpus, splits: Splits, kappa_max: int = 2) -> list[MetaPair]:
    """Filtered meta pairs of every order up to ``kappa_max`` from the training sessions."""
    train = corpus.sessions_for(splits.train)
    pairs: list[MetaPair] = []
    for k in range(1, kappa_max + 1):
        pairs += filter_meta_pairs(extract_meta_pairs(train, k))
    return pairs


def distill(
    corpus: Corpus, meta_pairs: Sequence[MetaPair], cfg: TrainConfig, seed: int,
    k0: KnowledgeTower | None = None, t_tower: TransferTower | None = None,
) -> DistillResult:
    """K0 -> T -> K1 for ``cfg.rounds`` rounds; each round starts from the previous K1."""
    k0 = k0 if k0 is not None else stage1_train(corpus, cfg, seed)[0]
    t_tower = t_tower if t_tower is not None else stage2_t_train(meta_pairs, corpus, cfg, seed)[0]
    res = None
    for r in range(cfg.rounds):
        init = None if res is None else res.tower
        res = stage2_k_train(k0, t_tower, meta_pairs, corpus, cfg, derive_seed(seed, "round", r), init=init)
    return res


def variant_embeddings(
    corpus: Corpus, splits: Splits, cfg: TrainConfig, seed: int, variant: str, cache: dict | None = None,
) -> EmbeddingTable | None:
    """Item embeddings for one ablation variant; upstream stages are shared through ``cache``."""
    cache = {} if cache is None else cache
    vcfg = variant_config(cfg, variant)
    if variant == "id-only":
        return None
    if variant == "random":
        return random_embeddings(corpus, cfg.d_sum, derive_seed(seed, "random-embeddings"))
    if "k0" not in cache:
        cache["k0"] = stage1_train(corpus, cfg, seed)[0]
    if variant == "tpad-na":
        return export_embeddings(cache["k0"], corpus, "K0")
    if "pairs" not in cache:
        cache["pairs"] = training_meta_pairs(corpus, splits, cfg.kappa_max)
    t_key = ("t", vcfg.mu, vcfg.tau)
    if t_key not in cache:
        cache[t_key] = stage2_t_train(cache["pairs"], corpus, vcfg, seed)[0]
    res = distill(corpus, cache["pairs"], vcfg, seed, cache["k0"], cache[t_key])
    cache[("k1", variant)] = res
    return export_embeddings(res.tower, corpus, "K1")
