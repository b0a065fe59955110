"""Frozen-backbone adaptation heads.

CLAM path: gated-attention pooling over per-patch features with an
instance-level clustering loss; LINEAR path: one affine layer on the slide
embedding. The backbone never enters these graphs; features arrive as plain
arrays, so the freeze contract holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Graph, Rng, Tensor, backward, no_grad, ops
from .errors import ConfigError, ShapeError
from .hipt import EMBED_DIM, HierarchicalModel
from .multitask import MISSING

PROTOCOL_CLAM = "clam"
PROTOCOL_LINEAR = "linear"
PROTOCOLS = (PROTOCOL_CLAM, PROTOCOL_LINEAR)
_LINEAR_STEPS_PER_EPOCH = 10

ATTN_HIDDEN = 16
K_INSTANCES = 4
LAMBDA_INSTANCE = 0.3


@dataclass
class ClamParams:
    """Gated-attention aggregator with bag and instance classifiers."""

    v: np.ndarray  # (d, h) tanh branch
    u: np.ndarray  # (d, h) sigmoid gate branch
    w: np.ndarray  # (h,) attention score
    cls_w: np.ndarray  # (d, n_classes)
    cls_b: np.ndarray  # (n_classes,)
    inst_w: np.ndarray  # (d, 2)
    inst_b: np.ndarray  # (2,)
    k_instances: int = K_INSTANCES

    @classmethod
    def init(cls, rng: Rng, embed_dim: int = EMBED_DIM, hidden: int = ATTN_HIDDEN,
             n_classes: int = 2, k_instances: int = K_INSTANCES) -> "ClamParams":
        if hidden < 1:
            raise ConfigError("attention hidden width must be >= 1")

        def draw(name, *shape):
            n = int(np.prod(shape))
            return rng.derive("init", name).truncated_normal_array(n, 0.02).reshape(shape).astype(np.float32)

        return cls(
            v=draw("v", embed_dim, hidden),
            u=draw("u", embed_dim, hidden),
            w=draw("w", hidden),
            cls_w=draw("cls_w", embed_dim, n_classes),
            cls_b=np.zeros(n_classes, dtype=np.float32),
            inst_w=draw("inst_w", embed_dim, 2),
            inst_b=np.zeros(2, dtype=np.float32),
            k_instances=k_instances,
        )

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"v": self.v, "u": self.u, "w": self.w, "cls_w": self.cls_w,
                "cls_b": self.cls_b, "inst_w": self.inst_w, "inst_b": self.inst_b}

    def bind(self, g: Graph) -> dict[str, Tensor]:
        return {k: g.tensor(a, requires_grad=True, name=k) for k, a in self.named_arrays().items()}


def attention_scores(g: Graph, p: dict[str, Tensor], feats: Tensor) -> Tensor:
    """Raw gate scores, one per patch: w · (tanh(f V) ⊙ σ(f U))."""
    gated = ops.mul(ops.tanh(ops.matmul(feats, p["v"])), ops.sigmoid(ops.matmul(feats, p["u"])))
    w_col = ops.reshape(p["w"], (p["w"].shape[0], 1))
    return ops.reshape(ops.matmul(gated, w_col), (feats.shape[0],))


def gated_attention(g: Graph, p: dict[str, Tensor], feats: Tensor) -> Tensor:
    """Softmax-normalized attention weights over the bag."""
    return ops.softmax(attention_scores(g, p, feats), axis=-1)


@dataclass
class ClamForward:
    bag_logits: Tensor  # (1, n_classes)
    weights: Tensor  # (n,)
    top_idx: np.ndarray  # (k,) highest-attention patches
    bottom_idx: np.ndarray  # (k,) lowest-attention patches


def clam_forward(g: Graph, p: dict[str, Tensor], feats: Tensor, k_instances: int = K_INSTANCES) -> ClamForward:
    n = feats.shape[0]
    if n < k_instances:
        raise ShapeError(f"bag of {n} patches cannot supply k={k_instances} instances")
    weights = gated_attention(g, p, feats)
    bag = ops.matmul(ops.reshape(weights, (1, n)), feats)  # (1, d)
    logits = ops.add(ops.matmul(bag, p["cls_w"]), p["cls_b"])
    order = np.argsort(weights.data, kind="stable")
    return ClamForward(
        bag_logits=logits,
        weights=weights,
        top_idx=order[n - k_instances:][::-1].copy(),
        bottom_idx=order[:k_instances].copy(),
    )


def _ce_rows(g: Graph, logits: Tensor, labels: np.ndarray) -> Tensor:
    n, c = logits.shape
    onehot = np.zeros((n, c), dtype=np.float64)
    onehot[np.arange(n), labels] = 1.0
    logp = ops.log_softmax(logits, axis=-1)
    picked = ops.sum(ops.mul(logp, g.constant(onehot)), axis=-1)
    return ops.mul_const(ops.mean(picked), -1.0)


def instance_cluster_loss(g: Graph, p: dict[str, Tensor], feats: Tensor, fwd: ClamForward) -> Tensor:
    """Binary CE on the instance classifier: top-k patches count as class
    evidence (1), bottom-k as background (0)."""
    idx = np.concatenate([fwd.top_idx, fwd.bottom_idx])
    rows = ops.take_rows(feats, idx)
    logits = ops.add(ops.matmul(rows, p["inst_w"]), p["inst_b"])
    labels = np.concatenate([
        np.ones(len(fwd.top_idx), dtype=np.int64),
        np.zeros(len(fwd.bottom_idx), dtype=np.int64),
    ])
    return _ce_rows(g, logits, labels)


def clam_loss(g: Graph, p: dict[str, Tensor], feats: Tensor, bag_label: int,
              k_instances: int = K_INSTANCES, lambda_instance: float = LAMBDA_INSTANCE) -> Tensor:
    fwd = clam_forward(g, p, feats, k_instances)
    bag_ce = _ce_rows(g, fwd.bag_logits, np.asarray([bag_label]))
    if lambda_instance == 0.0:
        return bag_ce
    inst = instance_cluster_loss(g, p, feats, fwd)
    return ops.add(bag_ce, ops.mul_const(inst, lambda_instance))


# -- feature extraction (frozen backbone) ------------------------------------


@dataclass
class SlideFeatures:
    slide_id: str
    patch_feats: np.ndarray  # (n, d) stage-1 CLS per patch
    slide_embed: np.ndarray  # (d,) stage-3 CLS


def extract_slide_features(model: HierarchicalModel, slide_patches: np.ndarray, grid: int,
                           slide_id: str = "") -> SlideFeatures:
    with Graph(dtype=np.float32) as g:
        with g.no_grad():
            bound = {k: g.constant(v, name=k) for k, v in model.arrays.items()}
            out = model.full_forward(g, bound, slide_patches, grid)
            patch_feats = np.array(out.patch_embeds.data, copy=True)
            slide_embed = np.array(out.slide_embed.data, copy=True).reshape(-1)
    return SlideFeatures(slide_id=slide_id, patch_feats=patch_feats, slide_embed=slide_embed)


# -- adaptation --------------------------------------------------------------


@dataclass(frozen=True)
class AdaptationConfig:
    protocol: str = PROTOCOL_CLAM
    epochs: int = 30
    lr: float = 5e-3
    lambda_instance: float = LAMBDA_INSTANCE
    k_instances: int = K_INSTANCES
    hidden: int = ATTN_HIDDEN
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass
class AdaptResult:
    protocol: str
    scores: dict[str, float]  # test slide_id -> positive-class probability
    head_arrays: dict[str, np.ndarray]
    train_loss_first: float
    train_loss_last: float


class _Adam:
    """Plain adaptive update, no decay; adaptation heads are tiny."""

    def __init__(self, arrays: dict[str, np.ndarray], lr: float):
        self.arrays = arrays
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in arrays.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in arrays.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - 0.9 ** self.t
        c2 = 1.0 - 0.999 ** self.t
        for name, garr in sorted(grads.items()):
            g = garr.astype(np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            p = self.arrays[name]
            p[...] = (p.astype(np.float64) - self.lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)).astype(p.dtype)


def _softmax_pos(logits: np.ndarray) -> float:
    z = logits.reshape(-1).astype(np.float64)
    z = z - z.max()
    e = np.exp(z)
    return float(e[1] / e.sum())


def adapt_clam(
    train_bags: list[tuple[str, np.ndarray, int]],  # (slide_id, feats (n,d), label)
    test_bags: list[tuple[str, np.ndarray]],
    config: AdaptationConfig,
) -> AdaptResult:
    if not train_bags:
        raise ConfigError("no training bags")
    rng = Rng(config.seed).derive("adapt", "clam")
    d = train_bags[0][1].shape[1]
    params = ClamParams.init(rng, embed_dim=d, hidden=config.hidden, n_classes=2,
                             k_instances=config.k_instances)
    opt = _Adam(params.named_arrays(), config.lr)
    first = last = None
    for epoch in range(config.epochs):
        order = rng.derive("epoch", epoch).permutation(len(train_bags))
        epoch_loss = 0.0
        for bi in order:
            sid, feats, label = train_bags[int(bi)]
            with Graph(dtype=np.float32) as g:
                p = params.bind(g)
                f = g.constant(feats)
                loss = clam_loss(g, p, f, label, config.k_instances, config.lambda_instance)
                backward(loss)
                grads = {t.name: np.array(t.grad, copy=True) for t in g.leaves}
                epoch_loss += loss.item()
            opt.step(grads)
        epoch_loss /= len(train_bags)
        if epoch == 0:
            first = epoch_loss
        last = epoch_loss

    scores: dict[str, float] = {}
    for sid, feats in test_bags:
        with Graph(dtype=np.float32) as g:
            with g.no_grad():
                p = {k: g.constant(a) for k, a in params.named_arrays().items()}
                fwd = clam_forward(g, p, g.constant(feats), config.k_instances)
                scores[sid] = _softmax_pos(np.array(fwd.bag_logits.data))
    return AdaptResult(PROTOCOL_CLAM, scores, params.named_arrays(), first, last)


def adapt_linear(
    train_embeds: list[tuple[str, np.ndarray, int]],  # (slide_id, embed (d,), label)
    test_embeds: list[tuple[str, np.ndarray]],
    config: AdaptationConfig,
) -> AdaptResult:
    if not train_embeds:
        raise ConfigError("no training embeddings")
    rng = Rng(config.seed).derive("adapt", "linear")
    d = train_embeds[0][1].shape[0]
    x = np.stack([e for _, e, _ in train_embeds]).astype(np.float32)
    y = np.asarray([lbl for _, _, lbl in train_embeds], dtype=np.int64)
    arrays = {
        "w": rng.derive("init", "w").truncated_normal_array(d * 2, 0.02).reshape(d, 2).astype(np.float32),
        "b": np.zeros(2, dtype=np.float32),
    }
    opt = _Adam(arrays, config.lr)
    first = last = None
    # full-batch steps are cheap at this width; several per epoch keeps the
    # total update count comparable to the per-bag protocol
    for step in range(config.epochs * _LINEAR_STEPS_PER_EPOCH):
        with Graph(dtype=np.float32) as g:
            w = g.tensor(arrays["w"], requires_grad=True, name="w")
            b = g.tensor(arrays["b"], requires_grad=True, name="b")
            logits = ops.add(ops.matmul(g.constant(x), w), b)
            loss = _ce_rows(g, logits, y)
            backward(loss)
            grads = {t.name: np.array(t.grad, copy=True) for t in g.leaves}
            val = loss.item()
        opt.step(grads)
        if step == 0:
            first = val
        last = val

    scores: dict[str, float] = {}
    for sid, embed in test_embeds:
        logits = embed.astype(np.float64) @ arrays["w"].astype(np.float64) + arrays["b"].astype(np.float64)
        scores[sid] = _softmax_pos(logits)
    return AdaptResult(PROTOCOL_LINEAR, scores, arrays, first, last)


def adapt(
    features: dict[str, SlideFeatures],
    labels: dict[str, int],
    train_ids: list[str],
    test_ids: list[str],
    config: AdaptationConfig,
) -> AdaptResult:
    """Dispatch one adaptation run. labels maps slide_id to a class index for
    the target task; train slides with MISSING labels are dropped.

    Inputs are standardized per dimension with train-set statistics before
    any head sees them; frozen encoder outputs sit at arbitrary offset and
    scale, and the heads are small enough to need unit-scale inputs."""
    usable = [s for s in train_ids if labels.get(s, MISSING) != MISSING]
    if config.protocol == PROTOCOL_CLAM:
        stats = np.concatenate([features[s].patch_feats for s in usable]) if usable else None
        if stats is None:
            raise ConfigError("no labeled training slides")
        mu = stats.mean(axis=0)
        sd = stats.std(axis=0) + 1e-6
        train = [(s, (features[s].patch_feats - mu) / sd, labels[s]) for s in usable]
        test = [(s, (features[s].patch_feats - mu) / sd) for s in test_ids]
        return adapt_clam(train, test, config)
    if not usable:
        raise ConfigError("no labeled training slides")
    stats = np.stack([features[s].slide_embed for s in usable])
    mu = stats.mean(axis=0)
    sd = stats.std(axis=0) + 1e-6
    train_e = [(s, (features[s].slide_embed - mu) / sd, labels[s]) for s in usable]
    test_e = [(s, (features[s].slide_embed - mu) / sd) for s in test_ids]
    return adapt_linear(train_e, test_e, config)
