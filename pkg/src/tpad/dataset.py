"""Corpus model, JSON Lines I/O, filtering, splitting, meta-pair extraction and a
synthetic generator with planted cluster-level Markov transitions."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, CorpusParseError, ReferentialError, SplitError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Item:
    id: int
    feat_txt: np.ndarray
    feat_img: np.ndarray
    vk: int
    cats: tuple[int, ...]


@dataclass(frozen=True)
class Session:
    sid: int
    items: tuple[int, ...]

    @property
    def target(self) -> int:
        return self.items[-1]

    @property
    def prefix(self) -> tuple[int, ...]:
        return self.items[:-1]


@dataclass(frozen=True)
class MetaPair:
    order: int
    query: tuple[int, ...]
    target: int


@dataclass(frozen=True)
class Splits:
    train: tuple[int, ...]
    valid: tuple[int, ...]
    test: tuple[int, ...]
    cold_items: frozenset[int] = frozenset()


@dataclass(eq=False)
class Corpus:
    """Items stored column-wise (rows sorted by id) plus chronological sessions."""

    item_ids: np.ndarray
    feat_txt: np.ndarray
    feat_img: np.ndarray
    vk: np.ndarray
    cats: np.ndarray
    sessions: list[Session]
    n_vk: int
    n_cat: int
    clusters: np.ndarray | None = None
    _index: dict[int, int] = field(init=False, repr=False)
    _sessions_by_id: dict[int, Session] = field(init=False, repr=False)

    def __post_init__(self):
        order = np.argsort(self.item_ids, kind="stable")
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)[order]
        self.feat_txt = np.asarray(self.feat_txt, dtype=np.float64)[order]
        self.feat_img = np.asarray(self.feat_img, dtype=np.float64)[order]
        self.vk = np.asarray(self.vk, dtype=np.int64)[order]
        cats = np.asarray(self.cats, dtype=np.int64)
        k = cats.shape[1] if cats.ndim == 2 else (cats.size // len(order) if len(order) else 0)
        self.cats = np.sort(cats.reshape(len(order), k), axis=1)[order]
        if self.clusters is not None:
            self.clusters = np.asarray(self.clusters, dtype=np.int64)[order]
        self._index = {int(i): r for r, i in enumerate(self.item_ids)}
        if len(self._index) != len(self.item_ids):
            raise ReferentialError("duplicate item ids")
        self._sessions_by_id = {s.sid: s for s in self.sessions}
        for s in self.sessions:
            for i in s.items:
                if i not in self._index:
                    raise ReferentialError(f"session {s.sid} references unknown item {i}")

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def d_in(self) -> int:
        return self.feat_txt.shape[1]

    @property
    def k_cat(self) -> int:
        return self.cats.shape[1]

    @property
    def n_interactions(self) -> int:
        return sum(len(s.items) for s in self.sessions)

    def row(self, item_id: int) -> int:
        try:
            return self._index[int(item_id)]
        except KeyError:
            raise KeyError(f"unknown item id {item_id}") from None

    def rows(self, item_ids: Iterable[int]) -> np.ndarray:
        return np.array([self.row(i) for i in item_ids], dtype=np.int64)

    def item(self, item_id: int) -> Item:
        r = self.row(item_id)
        return Item(int(self.item_ids[r]), self.feat_txt[r], self.feat_img[r], int(self.vk[r]), tuple(self.cats[r]))

    def session(self, sid: int) -> Session:
        return self._sessions_by_id[sid]

    def sessions_for(self, sids: Iterable[int]) -> list[Session]:
        return [self._sessions_by_id[s] for s in sids]

    def subset(self, keep_items: Iterable[int], sessions: list[Session]) -> "Corpus":
        rows = np.sort(self.rows(keep_items))
        return Corpus(
            self.item_ids[rows], self.feat_txt[rows], self.feat_img[rows], self.vk[rows], self.cats[rows],
            sessions, self.n_vk, self.n_cat,
            None if self.clusters is None else self.clusters[rows],
        )


# -- I/O ----------------------------------------------------------------------


def _read_jsonl(path: Path, required: Sequence[str]) -> list[tuple[int, dict]]:
    records = []
    with open(path) as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(path, no, f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise CorpusParseError(path, no, "record is not an object")
            missing = [k for k in required if k not in rec]
            if missing:
                raise CorpusParseError(path, no, f"missing keys {missing}")
            records.append((no, rec))
    return records


def load_corpus(items_path: str | Path, sessions_path: str | Path) -> Corpus:
    items_path, sessions_path = Path(items_path), Path(sessions_path)
    ids, txt, img, vk, cats = [], [], [], [], []
    dim = None
    for no, rec in _read_jsonl(items_path, ("id", "feat_txt", "feat_img", "vk", "cats")):
        try:
            t = np.asarray(rec["feat_txt"], dtype=np.float64)
            m = np.asarray(rec["feat_img"], dtype=np.float64)
            item_id, label = int(rec["id"]), int(rec["vk"])
            cat = [int(c) for c in rec["cats"]]
        except (TypeError, ValueError) as exc:
            raise CorpusParseError(items_path, no, str(exc)) from None
        if t.ndim != 1 or m.shape != t.shape or (dim is not None and t.shape[0] != dim):
            raise CorpusParseError(items_path, no, "inconsistent feature dimensions")
        if not (np.isfinite(t).all() and np.isfinite(m).all()):
            raise CorpusParseError(items_path, no, "non-finite feature value")
        if cats and len(cat) != len(cats[0]):
            raise CorpusParseError(items_path, no, "inconsistent category count")
        dim = t.shape[0]
        ids.append(item_id), txt.append(t), img.append(m), vk.append(label), cats.append(cat)
    sessions = []
    for no, rec in _read_jsonl(sessions_path, ("sid", "items")):
        try:
            sessions.append(Session(int(rec["sid"]), tuple(int(i) for i in rec["items"])))
        except (TypeError, ValueError) as exc:
            raise CorpusParseError(sessions_path, no, str(exc)) from None
    d = dim or 0
    return Corpus(
        np.array(ids, dtype=np.int64),
        np.array(txt).reshape(len(ids), d),
        np.array(img).reshape(len(ids), d),
        np.array(vk, dtype=np.int64),
        np.array(cats, dtype=np.int64).reshape(len(ids), -1),
        sessions,
        n_vk=max(vk, default=-1) + 1,
        n_cat=int(np.max(cats, initial=-1)) + 1,
    )


def save_corpus(corpus: Corpus, items_path: str | Path, sessions_path: str | Path) -> None:
    with open(items_path, "w") as fh:
        for r in range(corpus.n_items):
            fh.write(json.dumps({
                "id": int(corpus.item_ids[r]),
                "feat_txt": corpus.feat_txt[r].tolist(),
                "feat_img": corpus.feat_img[r].tolist(),
                "vk": int(corpus.vk[r]),
                "cats": corpus.cats[r].tolist(),
            }) + "\n")
    with open(sessions_path, "w") as fh:
        for s in corpus.sessions:
            fh.write(json.dumps({"sid": s.sid, "items": list(s.items)}) + "\n")


# -- preparation --------------------------------------------------------------


def filter_corpus(corpus: Corpus, min_item_count: int = 5, min_session_len: int = 2) -> Corpus:
    """Drop rare items and short sessions repeatedly until nothing changes."""
    if min_item_count < 1 or min_session_len < 1:
        raise ValueError("thresholds must be >= 1")
    sessions = [s.items for s in corpus.sessions]
    sids = [s.sid for s in corpus.sessions]
    while True:
        counts = Counter(i for items in sessions for i in items)
        keep = {i for i, c in counts.items() if c >= min_item_count}
        new_sids, new_sessions = [], []
        for sid, items in zip(sids, sessions):
            kept = tuple(i for i in items if i in keep)
            if len(kept) >= min_session_len:
                new_sids.append(sid)
                new_sessions.append(kept)
        if new_sessions == sessions:
            break
        sids, sessions = new_sids, new_sessions
    surviving = sorted({i for items in sessions for i in items})
    if not sessions:
        log.warning("filter_corpus removed every session")
    return corpus.subset(surviving, [Session(s, items) for s, items in zip(sids, sessions)])


def _partition_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    total = float(sum(ratios))
    sizes = [int(np.floor(n * r / total + 0.5)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    return sizes


def split_sessions(corpus: Corpus, ratios: Sequence[float] = (7, 2, 1), seed: int = 0) -> Splits:
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise SplitError("three positive ratios required")
    n = len(corpus.sessions)
    sizes = _partition_sizes(n, ratios)
    if n < 3 or min(sizes) <= 0:
        raise SplitError(f"{n} sessions cannot fill a {tuple(ratios)} split")
    order = np.random.default_rng(seed).permutation(n)
    sids = [corpus.sessions[i].sid for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return Splits(tuple(sids[:a]), tuple(sids[a:b]), tuple(sids[b:]))


def cold_split(
    corpus: Corpus, cold_frac: float = 0.3, seed: int = 0, ratios: Sequence[float] = (7, 2, 1)
) -> Splits:
    """Warm split, then reserve ``cold_frac`` of items as never-trained cold items.

    Training sessions touching a cold item move to the test partition.
    """
    if not 0.0 < cold_frac < 1.0:
        raise SplitError("cold_frac must lie in (0, 1)")
    warm = split_sessions(corpus, ratios, seed)
    n_cold = int(np.floor(cold_frac * corpus.n_items + 0.5))
    rng = np.random.default_rng([seed, 0xC01D])
    cold = frozenset(int(i) for i in rng.choice(corpus.item_ids, size=n_cold, replace=False))
    train, moved = [], []
    for sid in warm.train:
        (moved if cold.intersection(corpus.session(sid).items) else train).append(sid)
    if not train:
        raise SplitError("cold item selection leaves no training sessions")
    return Splits(tuple(train), warm.valid, warm.test + tuple(moved), cold)


def extract_meta_pairs(sessions: Iterable[Session | Sequence[int]], order: int) -> list[MetaPair]:
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    pairs = []
    for s in sessions:
        items = s.items if isinstance(s, Session) else tuple(s)
        for m in range(order, len(items)):
            pairs.append(MetaPair(order, tuple(items[m - order : m]), items[m]))
    return pairs


def filter_meta_pairs(pairs: Sequence[MetaPair]) -> list[MetaPair]:
    """Keep pairs whose target is a meta target at least twice within its order."""
    counts = Counter((p.order, p.target) for p in pairs)
    return [p for p in pairs if counts[(p.order, p.target)] > 1]


# -- synthetic corpus ----------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_clusters: int = 8
    items_per_cluster: int = 200
    n_sessions: int = 5000
    len_mean: float = 4.0
    len_min: int = 2
    len_max: int = 10
    d_in: int = 32
    sigma: float = 1.0
    centroid_scale: float = 1.0
    # fraction of centroid variance shared by the clusters of one label group
    group_share: float = 0.9
    group_size: int = 2
    n_vk: int = 4
    n_cat: int = 8
    k_cat: int = 2
    p_next: float = 0.7
    p_stay: float = 0.1
    t_mat: tuple[tuple[float, ...], ...] | None = None

    def transition_matrix(self) -> np.ndarray:
        L = self.n_clusters
        if self.t_mat is not None:
            t = np.asarray(self.t_mat, dtype=np.float64)
        else:
            rest = (1.0 - self.p_next - self.p_stay) / max(L - 2, 1)
            t = np.full((L, L), rest)
            for a in range(L):
                t[a, a] = self.p_stay
                t[a, (a + 1) % L] = self.p_next
        if t.shape != (L, L) or (t < 0).any() or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError("cluster transition matrix must be L x L and row-stochastic")
        return t

    def labels_for_cluster(self, cluster: int) -> tuple[int, tuple[int, ...]]:
        group = cluster // self.group_size
        vk = group % self.n_vk
        cats = tuple(sorted({(group * self.k_cat + j) % self.n_cat for j in range(self.k_cat)}))
        return vk, cats


def synth_generate(cfg: SynthConfig, seed: int = 0) -> Corpus:
    if cfg.k_cat > cfg.n_cat:
        raise ConfigError("k_cat cannot exceed n_cat")
    t_mat = cfg.transition_matrix()
    rng = np.random.default_rng(seed)
    L, per = cfg.n_clusters, cfg.items_per_cluster
    n = L * per
    cluster_of = rng.permutation(np.repeat(np.arange(L), per))
    if not 0.0 <= cfg.group_share <= 1.0:
        raise ConfigError("group_share must lie in [0, 1]")
    group = np.arange(L) // cfg.group_size
    shared, own = np.sqrt(cfg.group_share), np.sqrt(1.0 - cfg.group_share)
    cent_txt, cent_img = (
        cfg.centroid_scale * (shared * rng.normal(size=(L, cfg.d_in))[group] + own * rng.normal(size=(L, cfg.d_in)))
        for _ in range(2)
    )
    feat_txt = cent_txt[cluster_of] + cfg.sigma * rng.normal(size=(n, cfg.d_in))
    feat_img = cent_img[cluster_of] + cfg.sigma * rng.normal(size=(n, cfg.d_in))
    labels = [cfg.labels_for_cluster(c) for c in range(L)]
    vk = np.array([labels[c][0] for c in cluster_of])
    cats = np.array([labels[c][1] for c in cluster_of])
    members = [np.flatnonzero(cluster_of == c) for c in range(L)]
    sessions = []
    for sid in range(cfg.n_sessions):
        length = int(np.clip(cfg.len_min + rng.poisson(max(cfg.len_mean - cfg.len_min, 0.0)), cfg.len_min, cfg.len_max))
        c = int(rng.integers(L))
        items = []
        for _ in range(length):
            items.append(int(rng.choice(members[c])))
            c = int(rng.choice(L, p=t_mat[c]))
        sessions.append(Session(sid, tuple(items)))
    return Corpus(np.arange(n), feat_txt, feat_img, vk, cats, sessions, cfg.n_vk, cfg.n_cat, cluster_of)


def cluster_bigrams(corpus: Corpus) -> np.ndarray:
    """Counts of consecutive (cluster, cluster) transitions; synthetic corpora only."""
    if corpus.clusters is None:
        raise ValueError("corpus carries no cluster assignment")
    L = int(corpus.clusters.max()) + 1
    counts = np.zeros((L, L), dtype=np.int64)
    for s in corpus.sessions:
        cl = corpus.clusters[corpus.rows(s.items)]
        np.add.at(counts, (cl[:-1], cl[1:]), 1)
    return counts


def with_sessions(corpus: Corpus, sessions: list[Session]) -> Corpus:
    return replace(corpus, sessions=sessions)
