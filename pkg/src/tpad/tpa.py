"""Transitional pattern alignment: projectors that split item summaries into
transition-aware (z) and knowledge-reflected (w) parts, pooled transfer-tower
pattern summaries, and the CLUB/MINE alignment losses built on them."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .dataset import Corpus, MetaPair
from .errors import BatchError, ShapeError, StateError
from .mi_estimators import ClubEstimator, MineEstimator, club_estimate, mine_estimate
from .nn_core import Mlp, as_tensor
from .towers import TransferTower, query_features, t_tower_forward

MODALITIES = ("v", "t")
ROLES = ("H", "L", "T", "K")


class ProjectorSet(nn.Module):
    """Per modality: H (transition-aware), L (knowledge-reflected), T (pattern),
    K (zero-order) maps from summary space to the shared latent space."""

    def __init__(
        self, d_sum: int, d_lat: int, gen: torch.Generator,
        hidden: Sequence[int] | None = None, activation: str = "tanh",
    ):
        super().__init__()
        hidden = [d_lat] if hidden is None else list(hidden)
        self.d_sum, self.d_lat = d_sum, d_lat
        self.maps = nn.ModuleDict({
            f"{role}_{o}": Mlp([d_sum, *hidden, d_lat], gen, activation)
            for role in ROLES for o in MODALITIES
        })

    def project(self, role: str, o: str, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.d_sum:
            raise ShapeError(f"expected summary dim {self.d_sum}, got {x.shape[-1]}")
        return self.maps[f"{role}_{o}"](x)


@dataclass
class DecoupledFeatures:
    z: Tensor
    w: Tensor


def decouple(projectors: ProjectorSet, e: Tensor, o: str) -> DecoupledFeatures:
    return DecoupledFeatures(projectors.project("H", o, e), projectors.project("L", o, e))


@dataclass
class PatternSummary:
    target: int
    order: int
    modality: str
    pooled: Tensor  # mean transfer-tower summary over the group's meta queries
    count: int

    def projected(self, projectors: ProjectorSet) -> Tensor:
        return projectors.project("T", self.modality, self.pooled)


@torch.no_grad()
def build_pattern_summaries(
    t_tower: TransferTower, meta_pairs: Sequence[MetaPair], corpus: Corpus, batch_size: int = 1024
) -> dict[tuple[int, int, str], PatternSummary]:
    """Average the transfer-tower summaries of all meta queries sharing a (target, order)."""
    groups: dict[tuple[int, int], list[MetaPair]] = defaultdict(list)
    for p in meta_pairs:
        groups[(p.target, p.order)].append(p)
    out = {}
    for order in sorted({k[1] for k in groups}):
        keys = sorted(k for k in groups if k[1] == order)
        flat = [p for k in keys for p in groups[k]]
        cv, ct = [], []
        for start in range(0, len(flat), batch_size):
            chunk = flat[start : start + batch_size]
            res = t_tower_forward(t_tower, *query_features(corpus, chunk), order)
            cv.append(res.e_v)
            ct.append(res.e_t)
        cv, ct = torch.cat(cv), torch.cat(ct)
        pos = 0
        for key in keys:
            n = len(groups[key])
            for o, c in (("v", cv), ("t", ct)):
                out[(key[0], order, o)] = PatternSummary(key[0], order, o, c[pos : pos + n].mean(0), n)
            pos += n
    return out


def stack_pooled(
    summaries: Mapping[tuple[int, int, str], PatternSummary], targets: Sequence[int], order: int, o: str
) -> Tensor:
    try:
        return torch.stack([summaries[(int(t), order, o)].pooled for t in targets])
    except KeyError as exc:
        raise KeyError(f"no order-{order} pattern summary for target {exc.args[0][0]}") from None


def export_pattern_summaries(
    path: str | Path, summaries: Mapping[tuple[int, int, str], PatternSummary],
    projectors: ProjectorSet | None = None,
) -> None:
    """Diagnostic JSON table keyed by ``target:order:modality``."""
    table = {}
    with torch.no_grad():
        for (target, order, o), s in sorted(summaries.items()):
            rec = {"count": s.count, "pooled": s.pooled.tolist()}
            if projectors is not None:
                rec["projected"] = s.projected(projectors).tolist()
            table[f"{target}:{order}:{o}"] = rec
    Path(path).write_text(json.dumps(table, sort_keys=True))


def miu_loss(club: Mapping[str, ClubEstimator], z: Mapping[str, Tensor], w: Mapping[str, Tensor]) -> Tensor:
    """Sum over modalities of the CLUB upper bound on I(z; w); minimised."""
    total = 0.0
    for o in MODALITIES:
        if club[o].n_fit_steps == 0:
            raise StateError(f"CLUB estimator for modality {o!r} has not been fitted")
        total = total + club_estimate(club[o], z[o], w[o])
    return total


def _mine_sum(mine: Mapping[str, MineEstimator], a: Mapping[str, Tensor], b: Mapping[str, Tensor], perm) -> Tensor:
    total = 0.0
    perm = torch.as_tensor(np.asarray(perm), dtype=torch.long)
    for o in MODALITIES:
        if a[o].shape[0] < 2:
            raise BatchError("MINE alignment needs at least 2 samples")
        total = total + mine_estimate(mine[o], a[o], b[o], b[o][perm])
    return total


def mil_h_loss(mine_h: Mapping[str, MineEstimator], z: Mapping[str, Tensor], r: Mapping[str, Tensor], perm) -> Tensor:
    """Lower bound on I(z; r) summed over modalities; maximised."""
    return _mine_sum(mine_h, z, r, perm)


def mil_s_loss(mine_s: Mapping[str, MineEstimator], w: Mapping[str, Tensor], ebar: Mapping[str, Tensor], perm) -> Tensor:
    """Lower bound on I(w; projected zero-order embedding) summed over modalities; maximised."""
    if ebar is None:
        raise StateError("zero-order embeddings are missing; train the stage-0 tower first")
    return _mine_sum(mine_s, w, ebar, perm)
