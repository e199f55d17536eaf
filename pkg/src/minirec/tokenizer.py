"""Residual-quantisation tokenizer: item embeddings -> multi-level semantic IDs.

Two trainers share the :class:`Codebook` output.  ``train_rq_kmeans`` runs
Lloyd's k-means on each level's residuals; ``train_rq_vae`` learns an
encoder/decoder pair jointly with the codebooks.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"RQCB"
CODEBOOK_VERSION = 1
_HEADER = struct.Struct("<4sIIIId")


class CodebookFormatError(ValueError):
    pass


class IncompatibleVersionError(CodebookFormatError):
    pass


@dataclass
class Codebook:
    centroids: np.ndarray  # (L, K, d)
    beta_commit: float = 0.25

    @property
    def levels(self) -> int:
        return self.centroids.shape[0]

    @property
    def size(self) -> int:
        return self.centroids.shape[1]

    @property
    def dim(self) -> int:
        return self.centroids.shape[2]


@dataclass
class SidAssignment:
    item_id: int
    codes: tuple[int, ...]
    residual: np.ndarray
    disambiguation: int = 0
    extended: bool = False  # True when the item's triple collides and the index is emitted


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    sse_history: list[float]
    n_iter: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # explicit differences keep argmin identical to an exhaustive scan
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def nearest(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row (lowest index on ties) and its squared distance."""
    labels = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for s in range(0, len(x), chunk):
        d = _sq_dists(x[s : s + chunk], c)
        labels[s : s + chunk] = d.argmin(1)
        dist[s : s + chunk] = d[np.arange(len(d)), labels[s : s + chunk]]
    return labels, dist


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, iters: int = 50, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster takes the point farthest from its current centroid
    (drawn from clusters with at least two members).  Stops on a fixed
    point of the assignment or after ``iters`` iterations.  ``sse_history``
    holds the within-cluster SSE after each assignment step.
    """
    rng = np.random.default_rng(seed)
    n_distinct = len(np.unique(x, axis=0))
    k = min(k, n_distinct)
    centroids = kmeans_pp_init(x, k, rng)
    labels, dist = nearest(x, centroids)
    sse = [float(dist.sum())]
    n_iter = 0
    for n_iter in range(1, iters + 1):
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            movable = counts[labels] > 1
            cand = np.where(movable, dist, -1.0)
            p = int(cand.argmax())
            counts[labels[p]] -= 1
            labels[p] = j
            counts[j] = 1
            dist[p] = 0.0
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        centroids = sums / counts[:, None]
        new_labels, dist = nearest(x, centroids)
        sse.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return KMeansResult(centroids, labels, sse, n_iter)


def _pad_level(c: np.ndarray, k: int) -> np.ndarray:
    # Duplicate rows are never chosen: ties resolve to the lower index.
    if len(c) == k:
        return c
    reps = np.resize(np.arange(len(c)), k - len(c))
    return np.concatenate([c, c[reps]])


def train_rq_kmeans(
    embeddings: np.ndarray,
    levels: int = 3,
    k: int = 32,
    lloyd_iters: int = 50,
    seed: int = 0,
    beta_commit: float = 0.25,
    return_history: bool = False,
):
    """Codebook from recursive k-means on the residuals of each level."""
    x = np.asarray(embeddings, dtype=np.float64)
    residual = x.copy()
    books, histories = [], []
    for lvl in range(levels):
        res = kmeans(residual, k, lloyd_iters, seed + 1000 * lvl)
        if len(res.centroids) < k:
            log.info("level %d: only %d distinct residuals, padding to K=%d", lvl, len(res.centroids), k)
        book = _pad_level(res.centroids, k)
        books.append(book)
        histories.append(res.sse_history)
        labels, _ = nearest(residual, book)
        residual = residual - book[labels]
    cb = Codebook(np.stack(books), beta_commit)
    return (cb, histories) if return_history else cb


def quantize(x: np.ndarray, codebook: Codebook, item_id: int = -1) -> SidAssignment:
    """Greedy per-level nearest-centroid codes plus the exact final residual."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (codebook.dim,):
        raise ValueError(f"quantize: vector of dim {x.shape} vs codebook dim {codebook.dim}")
    r = x.copy()
    codes = []
    for lvl in range(codebook.levels):
        c = int(((codebook.centroids[lvl] - r) ** 2).sum(1).argmin())
        codes.append(c)
        r = r - codebook.centroids[lvl, c]
    return SidAssignment(item_id, tuple(codes), r)


def quantize_all(embeddings: np.ndarray, codebook: Codebook) -> list[SidAssignment]:
    x = np.asarray(embeddings, dtype=np.float64)
    r = x.copy()
    codes = np.zeros((len(x), codebook.levels), dtype=np.int64)
    for lvl in range(codebook.levels):
        codes[:, lvl], _ = nearest(r, codebook.centroids[lvl])
        r = r - codebook.centroids[lvl][codes[:, lvl]]
    return [SidAssignment(i, tuple(int(c) for c in codes[i]), r[i]) for i in range(len(x))]


def reconstruct(codes: Sequence[int], codebook: Codebook, decoder=None) -> np.ndarray:
    """Sum of the selected centroids, optionally passed through an RQ-VAE decoder."""
    if len(codes) != codebook.levels:
        raise ValueError(f"reconstruct: expected {codebook.levels} codes, got {len(codes)}")
    z = np.zeros(codebook.dim)
    for lvl, c in enumerate(codes):
        if not 0 <= c < codebook.size:
            raise ValueError(f"reconstruct: code {c} at level {lvl} outside [0, {codebook.size})")
        z = z + codebook.centroids[lvl, c]
    return z if decoder is None else decoder(z)


def reconstruction_mse(embeddings: np.ndarray, codebook: Codebook) -> float:
    assigns = quantize_all(embeddings, codebook)
    return float(np.mean([a.residual @ a.residual for a in assigns]))


def code_utilization(assignments: Sequence[SidAssignment], k: int) -> list[float]:
    levels = len(assignments[0].codes)
    return [len({a.codes[l] for a in assignments}) / k for l in range(levels)]


def disambiguate_collisions(assignments: Sequence[SidAssignment]) -> list[SidAssignment]:
    """Index items that share a code tuple 0, 1, 2, ... in item_id order."""
    groups: dict[tuple, list[SidAssignment]] = defaultdict(list)
    for a in assignments:
        groups[a.codes].append(a)
    out = []
    for a in assignments:
        members = sorted(groups[a.codes], key=lambda m: m.item_id)
        pos = next(i for i, m in enumerate(members) if m.item_id == a.item_id)
        out.append(SidAssignment(a.item_id, a.codes, a.residual, pos, len(members) > 1))
    return out


def sid_table(embeddings: np.ndarray, codebook: Codebook) -> list[SidAssignment]:
    return disambiguate_collisions(quantize_all(embeddings, codebook))


def save_sid_table(table: Sequence[SidAssignment], path) -> None:
    with open(path, "w") as fh:
        for a in table:
            fh.write(
                json.dumps(
                    {
                        "item_id": a.item_id,
                        "codes": list(a.codes),
                        "disambiguation": a.disambiguation,
                        "extended": a.extended,
                    }
                )
                + "\n"
            )


def load_sid_table(path) -> list[SidAssignment]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    SidAssignment(
                        int(rec["item_id"]),
                        tuple(int(c) for c in rec["codes"]),
                        np.zeros(0),
                        int(rec["disambiguation"]),
                        bool(rec.get("extended", False)),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad SID record ({exc})") from None
    return out


# --- codebook file ---------------------------------------------------------


def codebook_bytes(codebook: Codebook) -> bytes:
    L, K, d = codebook.centroids.shape
    head = _HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, L, K, d, float(codebook.beta_commit))
    return head + np.ascontiguousarray(codebook.centroids, dtype="<f8").tobytes()


def save_codebook(codebook: Codebook, path) -> None:
    with open(path, "wb") as fh:
        fh.write(codebook_bytes(codebook))


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CodebookFormatError(
            f"{path}: truncated header at offset {len(raw)} (need {_HEADER.size} bytes)"
        )
    magic, version, L, K, d, beta = _HEADER.unpack_from(raw, 0)
    if magic != CODEBOOK_MAGIC:
        raise CodebookFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != CODEBOOK_VERSION:
        raise IncompatibleVersionError(
            f"{path}: codebook format version {version}, this build reads {CODEBOOK_VERSION}"
        )
    need = _HEADER.size + 8 * L * K * d
    if len(raw) != need:
        raise CodebookFormatError(
            f"{path}: payload ends at offset {len(raw)}, expected {need} bytes for L={L} K={K} d={d}"
        )
    cents = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(L, K, d).astype(np.float64)
    return Codebook(cents, beta)


# --- RQ-VAE ----------------------------------------------------------------


@dataclass
class RqVaeConfig:
    latent_dim: int = 16
    hidden: int = 64
    levels: int = 3
    k: int = 32
    beta_commit: float = 0.25
    lr: float = 1e-3
    batch_size: int = 128
    steps: int = 300
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class RqVaeParams:
    """Two-layer encoder and decoder (tanh hidden layer) plus the codebook."""

    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    dec_w1: np.ndarray
    dec_b1: np.ndarray
    dec_w2: np.ndarray
    dec_b2: np.ndarray
    codebook: Codebook
    loss_history: list[float] = field(default_factory=list)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.enc_w1 + self.enc_b1) @ self.enc_w2 + self.enc_b2

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z @ self.dec_w1 + self.dec_b1) @ self.dec_w2 + self.dec_b2

    def assignments(self, x: np.ndarray) -> list[SidAssignment]:
        return disambiguate_collisions(quantize_all(self.encode(x), self.codebook))


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def init_rq_vae(dim: int, cfg: RqVaeConfig) -> RqVaeParams:
    rng = np.random.default_rng(cfg.seed)

    def lin(i, o):
        return rng.normal(0, 1.0 / np.sqrt(i), (i, o)), np.zeros(o)

    ew1, eb1 = lin(dim, cfg.hidden)
    ew2, eb2 = lin(cfg.hidden, cfg.latent_dim)
    dw1, db1 = lin(cfg.latent_dim, cfg.hidden)
    dw2, db2 = lin(cfg.hidden, dim)
    cb = Codebook(np.zeros((cfg.levels, cfg.k, cfg.latent_dim)), cfg.beta_commit)
    return RqVaeParams(ew1, eb1, ew2, eb2, dw1, db1, dw2, db2, cb)


_VAE_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2")


def rq_vae_loss(
    tensors: dict,
    codebook_t: ad.Tensor,
    x: np.ndarray,
    beta: float,
    parts: dict | None = None,
    frozen: dict | None = None,
):
    """Reconstruction + RQ loss, averaged over the batch.

    Residuals advance with stop-gradient codewords, so codeword gradients
    come only from ``|sg[r_l] - e_l|^2`` and the encoder sees the commitment
    term plus the straight-through reconstruction gradient.

    ``frozen`` pins every stop-gradient value: an empty dict is filled on
    the first call and later calls reuse it.  With the values pinned the
    loss is an ordinary function whose true gradient is the stop-gradient
    gradient, which is what a finite-difference check needs.
    """
    T = tensors
    z = ad.matmul(ad.tanh(ad.matmul(x, T["enc_w1"]) + T["enc_b1"]), T["enc_w2"]) + T["enc_b2"]
    n = x.shape[0]
    levels, k, dim = codebook_t.shape
    r = z
    zq_const = np.zeros_like(z.data)
    cb_loss = 0.0
    commit = 0.0
    codes = []
    replay = frozen is not None and bool(frozen)
    for lvl in range(levels):
        cents = codebook_t.data[lvl]
        if replay:
            c, r_sg, e_sg = frozen[lvl]
        else:
            c, _ = nearest(r.data, cents)
            r_sg, e_sg = r.data.copy(), cents[c].copy()
            if frozen is not None:
                frozen[lvl] = (c, r_sg, e_sg)
        codes.append(c)
        e = ad.embedding(ad.reshape(codebook_t, (levels * k, dim)), c + lvl * k)
        cb_loss = cb_loss + ad.squared_error(ad.Tensor(r_sg), e)
        commit = commit + ad.squared_error(r, ad.Tensor(e_sg))
        zq_const = zq_const + e_sg
        r = r - ad.Tensor(e_sg)
    # straight-through: forward value z_q, gradient of z
    if replay:
        shift = frozen["st"]
    else:
        shift = zq_const - z.data
        if frozen is not None:
            frozen["st"] = shift
    z_st = z + ad.Tensor(shift)
    xhat = ad.matmul(ad.tanh(ad.matmul(z_st, T["dec_w1"]) + T["dec_b1"]), T["dec_w2"]) + T["dec_b2"]
    reco = ad.squared_error(x, xhat)
    total = (reco + cb_loss + beta * commit) * (1.0 / n)
    if parts is not None:
        parts.update(
            reco=reco.item() / n,
            codebook=cb_loss.item() / n,
            commit=commit.item() / n,
            codes=np.stack(codes, 1),
        )
    return total


def train_rq_vae(embeddings: np.ndarray, cfg: RqVaeConfig | None = None) -> RqVaeParams:
    """Jointly train encoder, decoder and codebooks with AdamW.

    Codebooks are warm-started by residual k-means on the encoder outputs of
    the first batch.
    """
    cfg = cfg or RqVaeConfig()
    x_all = np.asarray(embeddings, dtype=np.float64)
    params = init_rq_vae(x_all.shape[1], cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    order = rng.permutation(len(x_all))
    first = x_all[order[: cfg.batch_size]]
    warm = train_rq_kmeans(params.encode(first), cfg.levels, cfg.k, 25, cfg.seed)
    params.codebook = Codebook(warm.centroids.copy(), cfg.beta_commit)

    tensors = {n: ad.Tensor(getattr(params, n).copy(), True, n) for n in _VAE_NAMES}
    book = ad.Tensor(params.codebook.centroids.copy(), True, "codebook")
    plist = list(tensors.values()) + [book]
    opt = ad.AdamW(plist, lr=cfg.lr, weight_decay=cfg.weight_decay)

    def checkpoint():
        snap = RqVaeParams(
            *[tensors[n].data.copy() for n in _VAE_NAMES],
            Codebook(book.data.copy(), cfg.beta_commit),
            list(params.loss_history),
        )
        return snap

    last_good = checkpoint()
    pos = cfg.batch_size
    for step in range(cfg.steps):
        if pos + cfg.batch_size > len(order):
            order = rng.permutation(len(x_all))
            pos = 0
        batch = x_all[order[pos : pos + cfg.batch_size]]
        pos += cfg.batch_size
        try:
            with ad.Tape() as tape:
                loss = rq_vae_loss(tensors, book, batch, cfg.beta_commit)
            grads = tape.gradient(loss, plist)
            opt.step(grads)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"RQ-VAE diverged at step {step}: {exc}", last_good) from exc
        params.loss_history.append(loss.item())
        if step % 25 == 0:
            last_good = checkpoint()
    out = checkpoint()
    return out
