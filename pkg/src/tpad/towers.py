"""Knowledge and transfer encoders, the label-classification generation loss and
the intra-order contrastive loss."""

from __future__ import annotations

from collections import defaultdict
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .dataset import Corpus, MetaPair
from .errors import BatchError, OrderError, ShapeError
from .nn_core import DTYPE, Linear, Mlp, as_tensor, cosine_matrix, cross_entropy, uniform_init


class TowerOutput(NamedTuple):
    e_v: Tensor
    e_t: Tensor
    vk_logits: Tensor
    cat_logits: Tensor  # (B, k_cat, n_cat)


class _DualBranchEncoder(nn.Module):
    """Per-modality input branches feeding a shared trunk.

    Each summary head sees the trunk output concatenated with its own modality
    branch, so the visual summary is conditioned on both modalities but keeps a
    direct path from the visual input.
    """

    def __init__(
        self,
        n_slots: int,
        d_in: int,
        d_h: int,
        d_sum: int,
        n_vk: int,
        n_cat: int,
        k_cat: int,
        gen: torch.Generator,
        order_flag: bool = False,
        activation: str = "tanh",
    ):
        super().__init__()
        self.d_in, self.d_h, self.d_sum = d_in, d_h, d_sum
        self.n_vk, self.n_cat, self.k_cat = n_vk, n_cat, k_cat
        self.proj_img = nn.ModuleList(Linear(d_in, d_h, gen) for _ in range(n_slots))
        self.proj_txt = nn.ModuleList(Linear(d_in, d_h, gen) for _ in range(n_slots))
        if order_flag:
            self.flag_img = nn.Parameter(uniform_init(1, (d_h,), gen))
            self.flag_txt = nn.Parameter(uniform_init(1, (d_h,), gen))
        self.trunk = Mlp([2 * d_h, d_h, d_h], gen, activation)
        self.head_v = Linear(2 * d_h, d_sum, gen)
        self.head_t = Linear(2 * d_h, d_sum, gen)
        self.vk_head = Linear(2 * d_sum, n_vk, gen)
        self.cat_head = Linear(2 * d_sum, k_cat * n_cat, gen)

    def _encode(self, slots_txt: Sequence[Tensor], slots_img: Sequence[Tensor], flag: float | None) -> TowerOutput:
        h_v = sum(p(x) for p, x in zip(self.proj_img, slots_img))
        h_t = sum(p(x) for p, x in zip(self.proj_txt, slots_txt))
        if flag is not None:
            h_v = h_v + flag * self.flag_img
            h_t = h_t + flag * self.flag_txt
        h_v, h_t = torch.tanh(h_v), torch.tanh(h_t)
        trunk = torch.tanh(self.trunk(torch.cat([h_v, h_t], dim=-1)))
        e_v = self.head_v(torch.cat([trunk, h_v], dim=-1))
        e_t = self.head_t(torch.cat([trunk, h_t], dim=-1))
        both = torch.cat([e_v, e_t], dim=-1)
        cat = self.cat_head(both).reshape(*both.shape[:-1], self.k_cat, self.n_cat)
        return TowerOutput(e_v, e_t, self.vk_head(both), cat)

    def zero_summary_heads(self) -> None:
        with torch.no_grad():
            for head in (self.head_v, self.head_t):
                head.weight.zero_()
                head.bias.zero_()


class KnowledgeTower(_DualBranchEncoder):
    def __init__(self, d_in, d_h, d_sum, n_vk, n_cat, k_cat, gen, activation="tanh"):
        super().__init__(1, d_in, d_h, d_sum, n_vk, n_cat, k_cat, gen, False, activation)

    def forward(self, feat_txt: Tensor, feat_img: Tensor) -> TowerOutput:
        return k_tower_forward(self, feat_txt, feat_img)


class TransferTower(_DualBranchEncoder):
    """Two query slots; slot 1 always holds the most recent query item."""

    def __init__(self, d_in, d_h, d_sum, n_vk, n_cat, k_cat, gen, activation="tanh"):
        super().__init__(2, d_in, d_h, d_sum, n_vk, n_cat, k_cat, gen, True, activation)

    def forward(self, query_txt: Tensor, query_img: Tensor, order: int) -> TowerOutput:
        return t_tower_forward(self, query_txt, query_img, order)


def k_tower_forward(tower: KnowledgeTower, feat_txt, feat_img) -> TowerOutput:
    feat_txt, feat_img = as_tensor(feat_txt), as_tensor(feat_img)
    if feat_txt.shape[-1] != tower.d_in or feat_img.shape[-1] != tower.d_in:
        raise ShapeError(f"item features must have dim {tower.d_in}")
    return tower._encode([feat_txt], [feat_img], None)


def t_tower_forward(tower: TransferTower, query_txt, query_img, order: int) -> TowerOutput:
    """``query_*`` has shape (B, order, d_in) in chronological order."""
    if order not in (1, 2):
        raise OrderError(f"order must be 1 or 2, got {order}")
    query_txt, query_img = as_tensor(query_txt), as_tensor(query_img)
    if query_txt.shape[-2:] != (order, tower.d_in) or query_img.shape != query_txt.shape:
        raise ShapeError(f"query features must have shape (B, {order}, {tower.d_in})")
    recent_t, recent_v = query_txt[..., -1, :], query_img[..., -1, :]
    if order == 2:
        older_t, older_v = query_txt[..., 0, :], query_img[..., 0, :]
    else:
        older_t, older_v = torch.zeros_like(recent_t), torch.zeros_like(recent_v)
    return tower._encode([recent_t, older_t], [recent_v, older_v], float(order - 1))


def gen_loss(vk_logits: Tensor, cat_logits: Tensor, vk: Tensor, cats: Tensor) -> Tensor:
    """Visual-keyword cross-entropy plus one cross-entropy per ranked category head."""
    vk = torch.as_tensor(vk, dtype=torch.long)
    cats = torch.as_tensor(cats, dtype=torch.long)
    if cats.shape[-1] != cat_logits.shape[-2]:
        raise ShapeError("one category head per category label required")
    loss = cross_entropy(vk_logits, vk)
    for j in range(cats.shape[-1]):
        loss = loss + cross_entropy(cat_logits[:, j, :], cats[:, j])
    return loss


def predict_labels(out: TowerOutput) -> tuple[np.ndarray, list[frozenset[int]]]:
    vk = out.vk_logits.argmax(dim=-1).numpy()
    heads = out.cat_logits.argmax(dim=-1).numpy()
    return vk, [frozenset(int(c) for c in row) for row in heads]


def _partners(target_ids: Sequence[int]) -> np.ndarray:
    groups: dict[int, list[int]] = defaultdict(list)
    for i, t in enumerate(target_ids):
        groups[int(t)].append(i)
    partner = np.empty(len(target_ids), dtype=np.int64)
    for t, idx in groups.items():
        if len(idx) != 2:
            raise BatchError(f"target {t} appears {len(idx)} times; contrastive groups need exactly 2")
        partner[idx[0]], partner[idx[1]] = idx[1], idx[0]
    return partner


def intra_cl_modality(c: Tensor, target_ids: Sequence[int], tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    partner = torch.as_tensor(_partners(target_ids))
    sim = cosine_matrix(c) / tau
    n = sim.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    log_den = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1)
    pos = sim[torch.arange(n), partner]
    return -(pos - log_den).mean()


def intra_cl_loss(c_v: Tensor, c_t: Tensor, target_ids: Sequence[int], tau: float) -> Tensor:
    """Contrastive loss applied independently to the visual and textual summaries."""
    return intra_cl_modality(c_v, target_ids, tau) + intra_cl_modality(c_t, target_ids, tau)


# -- batching ---------------------------------------------------------------


def item_features(corpus: Corpus, rows: np.ndarray) -> tuple[Tensor, Tensor]:
    return torch.from_numpy(corpus.feat_txt[rows]), torch.from_numpy(corpus.feat_img[rows])


def item_labels(corpus: Corpus, rows: np.ndarray) -> tuple[Tensor, Tensor]:
    return torch.from_numpy(corpus.vk[rows]), torch.from_numpy(corpus.cats[rows])


def query_features(corpus: Corpus, pairs: Sequence[MetaPair]) -> tuple[Tensor, Tensor]:
    rows = np.array([corpus.rows(p.query) for p in pairs], dtype=np.int64).reshape(len(pairs), -1)
    return torch.from_numpy(corpus.feat_txt[rows]), torch.from_numpy(corpus.feat_img[rows])


class ContrastiveBatcher:
    """Samples batches of B meta targets with two same-order pairs each.

    Each target's pairs are shuffled once; epoch ``e`` takes positions 2e and 2e+1
    (cyclically), so surplus pairs rotate in over successive epochs.
    """

    def __init__(self, pairs: Sequence[MetaPair], batch_targets: int, seed: int):
        orders = {p.order for p in pairs}
        if len(orders) > 1:
            raise BatchError("contrastive batches are built within a single order")
        self.order = orders.pop() if orders else None
        self.batch_targets = batch_targets
        self.seed = seed
        by_target: dict[int, list[MetaPair]] = defaultdict(list)
        for p in pairs:
            by_target[p.target].append(p)
        rng = np.random.default_rng(seed)
        self.groups = {}
        for t in sorted(by_target):
            group = by_target[t]
            if len(group) >= 2:
                self.groups[t] = [group[i] for i in rng.permutation(len(group))]
        self.targets = sorted(self.groups)

    def __len__(self) -> int:
        return -(-len(self.targets) // self.batch_targets)

    def epoch(self, e: int) -> list[list[MetaPair]]:
        rng = np.random.default_rng([self.seed, e])
        order = [self.targets[i] for i in rng.permutation(len(self.targets))]
        batches = []
        for start in range(0, len(order), self.batch_targets):
            batch = []
            for t in order[start : start + self.batch_targets]:
                g = self.groups[t]
                batch += [g[(2 * e) % len(g)], g[(2 * e + 1) % len(g)]]
            batches.append(batch)
        return batches
