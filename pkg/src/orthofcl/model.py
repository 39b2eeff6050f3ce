"""The frozen attention backbone with low-rank key/value adapters.

Each encoder layer computes single-head attention followed by a GELU MLP,
both with residual connections. Tokens are the rows of X, and the key and
value projections are reparameterized as

    K = X W_K^T + X (sum_{i<t} A_i B_i) + (X A_t) B_t

and likewise for V. A token orthogonal to every column of a frozen A_t
leaves the branch silent whatever B_t is, so bases drawn outside the memory
of past tokens keep past keys and values in place. Only the `B_t` matrices
and the classifier head are trainable; gradients are computed by hand and
are exact.
"""

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import numpy.typing as npt
from scipy import special  # type: ignore

from orthofcl.errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    StateError,
)
from orthofcl.linalg import DenseMatrix, is_orthonormal, qr_orthonormalize
from orthofcl.memory import Projection

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneConfig:
    """The shape of the frozen backbone.

    Parameters
    ----------
    embed_dim : int
        The token embedding dimension d, by default 32.
    num_layers : int
        The number of encoder layers L, by default 2.
    num_tokens : int
        The number of tokens s including the class token, by default 5.
    input_dim : int
        The flattened input dimension p, divisible by `num_tokens - 1`, by
        default 16.
    mlp_hidden : int | None
        The MLP hidden width, by default `None`, which means `2 * embed_dim`.
    """

    embed_dim: int = 32
    num_layers: int = 2
    num_tokens: int = 5
    input_dim: int = 16
    mlp_hidden: int | None = None

    def __post_init__(self) -> None:
        if self.embed_dim < 2:
            raise ConfigError("The embedding dimension should be at least 2.")

        if self.num_layers < 1:
            raise ConfigError("The number of layers should be positive.")

        if self.num_tokens < 2:
            raise ConfigError("The number of tokens should be at least 2.")

        if self.input_dim < 1 or self.input_dim % (self.num_tokens - 1):
            raise ConfigError(
                f"The input dimension {self.input_dim} should be divisible by "
                f"the {self.num_tokens - 1} patch tokens."
            )

        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 2 * self.embed_dim)
        elif self.mlp_hidden < 1:
            raise ConfigError("The MLP hidden width should be positive.")

    @property
    def patch_dim(self) -> int:
        """The number of input features per patch token.

        Returns
        -------
        int
            `input_dim // (num_tokens - 1)`.
        """

        return self.input_dim // (self.num_tokens - 1)


@dataclass(frozen=True, eq=False)
class LayerWeights:
    """The frozen weights of one encoder layer, all acting on column
    vectors."""

    w_q: DenseMatrix
    w_k: DenseMatrix
    w_v: DenseMatrix
    w_o: DenseMatrix
    w_1: DenseMatrix
    w_2: DenseMatrix


@dataclass(frozen=True, eq=False)
class Backbone:
    """The frozen backbone."""

    config: BackboneConfig
    patch_embed: DenseMatrix
    cls_token: npt.NDArray[np.float64]
    layers: tuple[LayerWeights, ...]

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """List the frozen tensors with stable names.

        Returns
        -------
        list[tuple[str, np.ndarray]]
            (name, tensor) pairs in a fixed order.
        """

        out: list[tuple[str, np.ndarray]] = [
            ("backbone.patch_embed", self.patch_embed),
            ("backbone.cls_token", self.cls_token),
        ]
        for i, layer in enumerate(self.layers):
            for f in dataclasses.fields(layer):
                out.append((f"backbone.layer{i}.{f.name}", getattr(layer, f.name)))

        return out

    def checksum(self) -> str:
        """Hash the frozen tensors.

        Returns
        -------
        str
            The SHA-256 hex digest of every tensor's bytes.
        """

        digest = hashlib.sha256()
        for name, tensor in self.tensors():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(tensor).tobytes())

        return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """One task's low-rank branch `a @ b` of one projection."""

    a: DenseMatrix
    b: DenseMatrix

    @property
    def rank(self) -> int:
        """The adapter rank r.

        Returns
        -------
        int
            The number of columns of `a`.
        """

        return self.a.shape[1]


@dataclass(frozen=True, eq=False)
class LayerAdapters:
    """The key and value adapters of one layer."""

    key: LoraAdapter
    value: LoraAdapter

    def __getitem__(self, projection: Projection) -> LoraAdapter:
        return self.key if projection is Projection.KEY else self.value


@dataclass(frozen=True, eq=False)
class ModelState:
    """The backbone, the merged adapter deltas, the current adapters and the
    classifier head."""

    backbone: Backbone
    merged_k: tuple[DenseMatrix, ...]
    merged_v: tuple[DenseMatrix, ...]
    adapters: tuple[LayerAdapters, ...] | None
    head: DenseMatrix
    task_index: int = 0
    task_sizes: tuple[int, ...] = ()

    @classmethod
    def initial(cls, backbone: Backbone) -> "ModelState":
        """Create the state before the first task.

        Parameters
        ----------
        backbone : Backbone
            The frozen backbone.

        Returns
        -------
        ModelState
            Zero merged deltas, no adapters and an empty head.
        """

        d = backbone.config.embed_dim
        zeros = tuple(np.zeros((d, d)) for _ in backbone.layers)

        return cls(
            backbone=backbone,
            merged_k=zeros,
            merged_v=tuple(z.copy() for z in zeros),
            adapters=None,
            head=np.zeros((0, d)),
        )

    @property
    def num_classes(self) -> int:
        """The number of classes seen so far.

        Returns
        -------
        int
            The head row count.
        """

        return self.head.shape[0]

    @property
    def active_classes(self) -> tuple[int, int]:
        """The head row range of the current task.

        Returns
        -------
        tuple[int, int]
            The half-open range `(start, stop)`.
        """

        if not self.task_sizes:
            return (0, 0)

        return (self.num_classes - self.task_sizes[-1], self.num_classes)

    def merged(self, projection: Projection) -> tuple[DenseMatrix, ...]:
        """The merged deltas of a projection.

        Parameters
        ----------
        projection : Projection
            The projection.

        Returns
        -------
        tuple[DenseMatrix, ...]
            One d × d delta per layer.
        """

        return self.merged_k if projection is Projection.KEY else self.merged_v

    def trainables(self) -> list[tuple[str, np.ndarray]]:
        """List the trainable tensors with their optimizer names.

        Returns
        -------
        list[tuple[str, np.ndarray]]
            Every current B and the current-task head rows.
        """

        out = []
        if self.adapters is not None:
            for i, layer in enumerate(self.adapters):
                out.append((f"layer{i}.key.b", layer.key.b))
                out.append((f"layer{i}.value.b", layer.value.b))

        start, stop = self.active_classes
        out.append(("head", self.head[start:stop]))

        return out

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """List every tensor with stable names.

        Returns
        -------
        list[tuple[str, np.ndarray]]
            The backbone, merged deltas, current adapters and full head.
        """

        out = self.backbone.tensors()
        for i, (mk, mv) in enumerate(zip(self.merged_k, self.merged_v)):
            out.append((f"merged.layer{i}.key", mk))
            out.append((f"merged.layer{i}.value", mv))

        if self.adapters is not None:
            for i, layer in enumerate(self.adapters):
                for p in Projection:
                    out.append((f"adapter.layer{i}.{p.value}.a", layer[p].a))
                    out.append((f"adapter.layer{i}.{p.value}.b", layer[p].b))

        out.append(("head", self.head))
        return out

    def checksum(self) -> str:
        """Hash every tensor of the model.

        Returns
        -------
        str
            The SHA-256 hex digest.
        """

        digest = hashlib.sha256()
        for name, tensor in self.tensors():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(tensor).tobytes())

        return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class GradientSet:
    """The gradients of the trainable tensors."""

    db_k: tuple[DenseMatrix, ...]
    db_v: tuple[DenseMatrix, ...]
    d_head: DenseMatrix
    head_rows: tuple[int, int]
    loss: float


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """The AdamW state.

    Parameters
    ----------
    lr_adapter : float
        The learning rate of the B matrices.
    lr_head : float
        The learning rate of the head rows.
    weight_decay : float
        The decoupled weight decay λ.
    beta1, beta2 : float
        The moment decay rates, by default 0.9 and 0.999.
    eps : float
        The denominator offset, by default 1e-8.
    step : int
        The number of steps taken, by default 0.
    moments : dict[str, tuple[np.ndarray, np.ndarray]]
        The first and second moments per trainable tensor.
    """

    lr_adapter: float
    lr_head: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def init_backbone(cfg: BackboneConfig, seed: int) -> Backbone:
    """Draw a frozen random backbone.

    Parameters
    ----------
    cfg : BackboneConfig
        The backbone shape.
    seed : int
        The random seed.

    Returns
    -------
    Backbone
        Weights drawn i.i.d. from N(0, 1/d), read-only.
    """

    rng = np.random.default_rng(seed)
    d, h = cfg.embed_dim, cfg.mlp_hidden
    scale = 1 / math.sqrt(d)

    def draw(*shape: int) -> np.ndarray:
        return _frozen(rng.standard_normal(shape) * scale)

    patch_embed = draw(d, cfg.patch_dim)
    cls_token = draw(d)
    layers = tuple(
        LayerWeights(
            w_q=draw(d, d),
            w_k=draw(d, d),
            w_v=draw(d, d),
            w_o=draw(d, d),
            w_1=draw(h, d),
            w_2=draw(d, h),
        )
        for _ in range(cfg.num_layers)
    )

    return Backbone(cfg, patch_embed, cls_token, layers)


def random_bases(
    cfg: BackboneConfig, r: int, rng: np.random.Generator
) -> tuple[tuple[DenseMatrix, DenseMatrix], ...]:
    """Draw random orthonormal adapter bases, ignoring any memory.

    Parameters
    ----------
    cfg : BackboneConfig
        The backbone shape.
    r : int
        The adapter rank.
    rng : numpy.random.Generator
        The generator.

    Returns
    -------
    tuple[tuple[DenseMatrix, DenseMatrix], ...]
        One (A_K, A_V) pair per layer.
    """

    d = cfg.embed_dim
    return tuple(
        (
            qr_orthonormalize(rng.standard_normal((d, r))),
            qr_orthonormalize(rng.standard_normal((d, r))),
        )
        for _ in range(cfg.num_layers)
    )


def begin_task(
    model: ModelState,
    bases: Sequence[tuple[DenseMatrix, DenseMatrix]],
    new_classes: int,
) -> ModelState:
    """Install the frozen adapter bases of a new task.

    Parameters
    ----------
    model : ModelState
        The model, with no unmerged adapters.
    bases : Sequence[tuple[DenseMatrix, DenseMatrix]]
        One (A_K, A_V) pair per layer, each d × r with orthonormal columns.
    new_classes : int
        The number of classes of the new task.

    Returns
    -------
    ModelState
        The model with zero B matrices, `new_classes` zero head rows appended,
        and the task index incremented.

    Raises
    ------
    StateError
        If the previous task's adapters were not merged.
    ConfigError
        If `new_classes` is less than 1.
    DimensionError
        If the bases do not match the backbone.
    ContractError
        If a basis is not orthonormal, or a layer does not hold exactly
        one matrix per projection.
    """

    if model.adapters is not None:
        raise StateError("The current task's adapters must be merged first.")

    if new_classes < 1:
        raise ConfigError("A task should have at least one class.")

    cfg = model.backbone.config
    d = cfg.embed_dim

    if len(bases) != cfg.num_layers:
        raise DimensionError(
            f"got bases for {len(bases)} layers, the backbone has {cfg.num_layers}"
        )

    for i, pair in enumerate(bases):
        if len(pair) != 2:
            raise ContractError(
                f"layer {i}: expected an (A_K, A_V) pair, got {len(pair)} bases"
            )

        for a in pair:
            if np.ndim(a) != 2:
                raise ContractError(f"layer {i}: an adapter basis should be a matrix")

    ranks = {np.shape(a)[1] for pair in bases for a in pair}
    if len(ranks) != 1:
        raise DimensionError(f"adapter bases have mixed ranks {sorted(ranks)}")

    adapters = []
    for i, pair in enumerate(bases):
        layer = []
        for a in pair:
            a = np.array(a, dtype=np.float64)

            if a.ndim != 2 or a.shape[0] != d:
                raise DimensionError(
                    f"layer {i}: basis of shape {a.shape} does not act on R^{d}"
                )

            if not is_orthonormal(a):
                raise ContractError(f"layer {i}: adapter basis is not orthonormal")

            layer.append(LoraAdapter(a=_frozen(a), b=np.zeros((a.shape[1], d))))

        adapters.append(LayerAdapters(key=layer[0], value=layer[1]))

    return dataclasses.replace(
        model,
        adapters=tuple(adapters),
        head=np.vstack([model.head, np.zeros((new_classes, d))]),
        task_index=model.task_index + 1,
        task_sizes=model.task_sizes + (new_classes,),
    )


def merge_current_task(model: ModelState) -> ModelState:
    """Fold the current adapters into the merged deltas.

    Parameters
    ----------
    model : ModelState
        The model with current adapters.

    Returns
    -------
    ModelState
        The model with `merged += A @ B` per layer and projection and no
        current adapters.

    Raises
    ------
    StateError
        If there are no current adapters, e.g. on a double merge.
    """

    if model.adapters is None:
        raise StateError("There are no current adapters to merge.")

    merged_k = tuple(
        m + layer.key.a @ layer.key.b
        for m, layer in zip(model.merged_k, model.adapters)
    )
    merged_v = tuple(
        m + layer.value.a @ layer.value.b
        for m, layer in zip(model.merged_v, model.adapters)
    )

    return dataclasses.replace(
        model, merged_k=merged_k, merged_v=merged_v, adapters=None
    )


def _gelu(x: np.ndarray) -> np.ndarray:
    return x * special.ndtr(x)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return special.ndtr(x) + x * np.exp(-0.5 * x**2) / math.sqrt(2 * math.pi)


def _embed(backbone: Backbone, x: DenseMatrix) -> np.ndarray:
    cfg = backbone.config
    n = x.shape[0]
    patches = x.reshape(n, cfg.num_tokens - 1, cfg.patch_dim)
    tokens = patches @ backbone.patch_embed.T
    cls = np.broadcast_to(backbone.cls_token, (n, 1, cfg.embed_dim))

    return np.concatenate([cls, tokens], axis=1)


def _project(
    x: np.ndarray, w: DenseMatrix, adapter: LoraAdapter | None
) -> tuple[np.ndarray, np.ndarray | None]:
    out = x @ w.T
    if adapter is None:
        return out, None

    u = x @ adapter.a
    return out + u @ adapter.b, u


def _project_backward(
    g_out: np.ndarray, x: np.ndarray, w: DenseMatrix, adapter: LoraAdapter | None
) -> tuple[DenseMatrix | None, np.ndarray]:
    g_x = g_out @ w
    if adapter is None:
        return None, g_x

    u = x @ adapter.a
    db = np.einsum("nsr,nsd->rd", u, g_out)

    return db, g_x + (g_out @ adapter.b.T) @ adapter.a.T


@dataclass(eq=False)
class _LayerCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    p: np.ndarray
    pre: np.ndarray


def _layer_forward(
    x: np.ndarray,
    weights: LayerWeights,
    w_k: DenseMatrix,
    w_v: DenseMatrix,
    adapters: LayerAdapters | None,
) -> tuple[np.ndarray, _LayerCache]:
    d = x.shape[-1]

    q = x @ weights.w_q.T
    k, _ = _project(x, w_k, adapters.key if adapters else None)
    v, _ = _project(x, w_v, adapters.value if adapters else None)

    p = special.softmax(q @ k.swapaxes(-1, -2) / math.sqrt(d), axis=-1)
    x1 = x + (p @ v) @ weights.w_o.T
    pre = x1 @ weights.w_1.T
    x2 = x1 + _gelu(pre) @ weights.w_2.T

    return x2, _LayerCache(x=x, q=q, k=k, v=v, p=p, pre=pre)


def _layer_backward(
    g2: np.ndarray,
    cache: _LayerCache,
    weights: LayerWeights,
    w_k: DenseMatrix,
    w_v: DenseMatrix,
    adapters: LayerAdapters | None,
) -> tuple[np.ndarray, DenseMatrix | None, DenseMatrix | None]:
    d = cache.x.shape[-1]

    g_pre = (g2 @ weights.w_2) * _gelu_grad(cache.pre)
    g1 = g2 + g_pre @ weights.w_1

    g_o = g1 @ weights.w_o
    g_p = g_o @ cache.v.swapaxes(-1, -2)
    g_v = cache.p.swapaxes(-1, -2) @ g_o
    g_s = cache.p * (g_p - np.sum(g_p * cache.p, axis=-1, keepdims=True))
    g_s /= math.sqrt(d)

    g_q = g_s @ cache.k
    g_k = g_s.swapaxes(-1, -2) @ cache.q

    db_k, gx_k = _project_backward(
        g_k, cache.x, w_k, adapters.key if adapters else None
    )
    db_v, gx_v = _project_backward(
        g_v, cache.x, w_v, adapters.value if adapters else None
    )

    g_x = g1 + g_q @ weights.w_q + gx_k + gx_v

    return g_x, db_k, db_v


def _effective(model: ModelState, i: int) -> tuple[DenseMatrix, DenseMatrix]:
    layer = model.backbone.layers[i]
    return layer.w_k + model.merged_k[i].T, layer.w_v + model.merged_v[i].T


def _check_batch(model: ModelState, batch: npt.ArrayLike) -> DenseMatrix:
    x = np.asarray(batch, dtype=np.float64)
    p = model.backbone.config.input_dim

    if x.ndim != 2 or x.shape[1] != p:
        raise DimensionError(f"expected a batch of shape (n, {p}), got {x.shape}")

    return x


def _encode(
    model: ModelState, x: DenseMatrix
) -> tuple[np.ndarray, list[_LayerCache]]:
    h = _embed(model.backbone, x)
    caches = []

    for i, weights in enumerate(model.backbone.layers):
        w_k, w_v = _effective(model, i)
        adapters = model.adapters[i] if model.adapters else None
        h, cache = _layer_forward(h, weights, w_k, w_v, adapters)
        caches.append(cache)

    return h, caches


def forward(
    model: ModelState, batch: npt.ArrayLike, capture: bool = False
) -> tuple[DenseMatrix, tuple[DenseMatrix, ...] | None]:
    """Compute the logits over all seen classes.

    Parameters
    ----------
    model : ModelState
        The model.
    batch : ArrayLike
        The inputs, shape (n, p).
    capture : bool, optional
        Whether to return the key/value projection inputs, by default False.

    Returns
    -------
    tuple[DenseMatrix, tuple[DenseMatrix, ...] | None]
        The (n, num_classes) logits, and when `capture` is set, one
        (n * s, d) matrix of token embeddings per layer, class tokens
        included. The key and value projections of a layer share these
        inputs.

    Raises
    ------
    DimensionError
        If the batch has the wrong shape.
    """

    x = _check_batch(model, batch)
    h, caches = _encode(model, x)
    logits = h[:, 0, :] @ model.head.T

    if not capture:
        return logits, None

    d = model.backbone.config.embed_dim
    return logits, tuple(c.x.reshape(-1, d).copy() for c in caches)


def loss_and_grads(
    model: ModelState,
    batch: npt.ArrayLike,
    labels: npt.ArrayLike,
    active_class_range: tuple[int, int] | None = None,
) -> GradientSet:
    """Compute the masked cross-entropy and its exact gradients.

    Parameters
    ----------
    model : ModelState
        The model.
    batch : ArrayLike
        The inputs, shape (n, p).
    labels : ArrayLike
        The head row index of every sample.
    active_class_range : tuple[int, int] | None, optional
        The half-open range of head rows the loss is restricted to, by
        default `None`, which means the current task's classes.

    Returns
    -------
    GradientSet
        The mean loss and the gradients of every current B and of the active
        head rows.

    Raises
    ------
    DimensionError
        If the batch has the wrong shape.
    DataError
        If a label lies outside the active range.
    """

    x = _check_batch(model, batch)
    y = np.asarray(labels, dtype=np.int64)
    start, stop = active_class_range or model.active_classes

    if y.shape != (x.shape[0],):
        raise DataError(f"expected {x.shape[0]} labels, got shape {y.shape}")

    if stop <= start or np.any((y < start) | (y >= stop)):
        raise DataError(f"labels should lie in the active range [{start}, {stop}).")

    n = x.shape[0]
    h, caches = _encode(model, x)
    z = h[:, 0, :]
    head = model.head[start:stop]

    logp = special.log_softmax(z @ head.T, axis=1)
    target = y - start
    loss = -float(np.mean(logp[np.arange(n), target]))

    g_logits = np.exp(logp)
    g_logits[np.arange(n), target] -= 1.0
    g_logits /= n

    d_head = g_logits.T @ z
    g_h = np.zeros_like(h)
    g_h[:, 0, :] = g_logits @ head

    db_k: list[DenseMatrix] = []
    db_v: list[DenseMatrix] = []
    for i in reversed(range(len(caches))):
        w_k, w_v = _effective(model, i)
        adapters = model.adapters[i] if model.adapters else None
        g_h, gk, gv = _layer_backward(
            g_h, caches[i], model.backbone.layers[i], w_k, w_v, adapters
        )
        if gk is not None and gv is not None:
            db_k.append(gk)
            db_v.append(gv)

    return GradientSet(
        db_k=tuple(reversed(db_k)),
        db_v=tuple(reversed(db_v)),
        d_head=d_head,
        head_rows=(start, stop),
        loss=loss,
    )


def _adamw_step(
    opt: OptimizerState,
    moments: dict[str, tuple[np.ndarray, np.ndarray]],
    name: str,
    param: np.ndarray,
    grad: np.ndarray,
    lr: float,
    step: int,
) -> np.ndarray:
    m, v = opt.moments.get(name, (np.zeros_like(param), np.zeros_like(param)))
    if m.shape != param.shape:
        m, v = np.zeros_like(param), np.zeros_like(param)

    m = opt.beta1 * m + (1 - opt.beta1) * grad
    v = opt.beta2 * v + (1 - opt.beta2) * grad**2
    moments[name] = (m, v)

    m_hat = m / (1 - opt.beta1**step)
    v_hat = v / (1 - opt.beta2**step)

    return param * (1 - lr * opt.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def apply_adamw(
    model: ModelState, grads: GradientSet, opt: OptimizerState
) -> tuple[ModelState, OptimizerState]:
    """Take one AdamW step on the trainable tensors.

    Parameters
    ----------
    model : ModelState
        The model.
    grads : GradientSet
        The gradients from `loss_and_grads`.
    opt : OptimizerState
        The optimizer state.

    Returns
    -------
    tuple[ModelState, OptimizerState]
        The updated model and optimizer state. Frozen tensors and head rows
        outside `grads.head_rows` are untouched.

    Raises
    ------
    StateError
        If the gradients have B matrices the model lacks, or vice versa.
    """

    step = opt.step + 1
    moments = dict(opt.moments)

    if (model.adapters is None) != (len(grads.db_k) == 0):
        raise StateError("The gradients do not match the model's adapters.")

    adapters = None
    if model.adapters is not None:
        new_layers = []
        for i, layer in enumerate(model.adapters):
            b_k = _adamw_step(
                opt, moments, f"layer{i}.key.b", layer.key.b, grads.db_k[i],
                opt.lr_adapter, step,
            )
            b_v = _adamw_step(
                opt, moments, f"layer{i}.value.b", layer.value.b, grads.db_v[i],
                opt.lr_adapter, step,
            )
            new_layers.append(
                LayerAdapters(
                    key=LoraAdapter(a=layer.key.a, b=b_k),
                    value=LoraAdapter(a=layer.value.a, b=b_v),
                )
            )
        adapters = tuple(new_layers)

    start, stop = grads.head_rows
    head = model.head.copy()
    head[start:stop] = _adamw_step(
        opt, moments, "head", model.head[start:stop], grads.d_head, opt.lr_head, step
    )

    return (
        dataclasses.replace(model, adapters=adapters, head=head),
        dataclasses.replace(opt, step=step, moments=moments),
    )


def replace_trainables(
    model: ModelState,
    b_k: Sequence[DenseMatrix],
    b_v: Sequence[DenseMatrix],
    head_rows: DenseMatrix,
) -> ModelState:
    """Set every current B and the current-task head rows.

    Parameters
    ----------
    model : ModelState
        The model with current adapters.
    b_k, b_v : Sequence[DenseMatrix]
        The new B matrices per layer.
    head_rows : DenseMatrix
        The new head rows of the current task.

    Returns
    -------
    ModelState
        The updated model.

    Raises
    ------
    StateError
        If the model has no current adapters.
    """

    if model.adapters is None:
        raise StateError("There are no current adapters to set.")

    adapters = tuple(
        LayerAdapters(
            key=LoraAdapter(a=layer.key.a, b=np.array(bk, dtype=np.float64)),
            value=LoraAdapter(a=layer.value.a, b=np.array(bv, dtype=np.float64)),
        )
        for layer, bk, bv in zip(model.adapters, b_k, b_v)
    )
    start, stop = model.active_classes
    head = model.head.copy()
    head[start:stop] = head_rows

    return dataclasses.replace(model, adapters=adapters, head=head)


def check_gradients(
    model: ModelState,
    batch: npt.ArrayLike,
    labels: npt.ArrayLike,
    *,
    step: float = 1e-5,
) -> float:
    """Compare the analytic gradients with central finite differences.

    Parameters
    ----------
    model : ModelState
        The model with current adapters.
    batch : ArrayLike
        The inputs.
    labels : ArrayLike
        The labels within the current task.
    step : float, optional
        The finite difference step, by default 1e-5.

    Returns
    -------
    float
        The largest relative error `|a - n| / max(|a| + |n|, 1e-6)` over every
        entry of every B and of the active head rows.
    """

    grads = loss_and_grads(model, batch, labels)
    b_k = [layer.key.b for layer in model.adapters or ()]
    b_v = [layer.value.b for layer in model.adapters or ()]
    start, stop = model.active_classes
    head = model.head[start:stop]

    def loss_with(bk: list, bv: list, hd: DenseMatrix) -> float:
        return loss_and_grads(replace_trainables(model, bk, bv, hd), batch, labels).loss

    def numeric(tensor: DenseMatrix, rebuild) -> DenseMatrix:
        out = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            plus, minus = tensor.copy(), tensor.copy()
            plus[idx] += step
            minus[idx] -= step
            out[idx] = (rebuild(plus) - rebuild(minus)) / (2 * step)
        return out

    pairs = []
    for i in range(len(b_k)):
        pairs.append(
            (
                grads.db_k[i],
                numeric(
                    b_k[i],
                    lambda t, i=i: loss_with(b_k[:i] + [t] + b_k[i + 1 :], b_v, head),
                ),
            )
        )
        pairs.append(
            (
                grads.db_v[i],
                numeric(
                    b_v[i],
                    lambda t, i=i: loss_with(b_k, b_v[:i] + [t] + b_v[i + 1 :], head),
                ),
            )
        )
    pairs.append((grads.d_head, numeric(head, lambda t: loss_with(b_k, b_v, t))))

    worst = 0.0
    for analytic, approx in pairs:
        err = np.abs(analytic - approx) / np.maximum(
            np.abs(analytic) + np.abs(approx), 1e-6
        )
        worst = max(worst, float(np.max(err)))

    return worst


def gradcheck_instance(
    dim: int = 16,
    layers: int = 2,
    rank: int = 2,
    tokens: int = 4,
    classes: int = 3,
    batch: int = 6,
    seed: int = 0,
) -> float:
    """Run the finite difference check on a random small model.

    The B matrices and the head are filled with random values so every
    gradient path carries signal.

    Parameters
    ----------
    dim, layers, rank, tokens, classes, batch : int
        The instance shape.
    seed : int, optional
        The random seed, by default 0.

    Returns
    -------
    float
        The largest relative error, see `check_gradients`.
    """

    cfg = BackboneConfig(
        embed_dim=dim, num_layers=layers, num_tokens=tokens, input_dim=2 * (tokens - 1)
    )
    rng = np.random.default_rng(seed)
    model = ModelState.initial(init_backbone(cfg, seed))
    model = begin_task(model, random_bases(cfg, rank, rng), classes)
    model = replace_trainables(
        model,
        [rng.standard_normal((rank, dim)) * 0.5 for _ in range(layers)],
        [rng.standard_normal((rank, dim)) * 0.5 for _ in range(layers)],
        rng.standard_normal((classes, dim)),
    )

    x = rng.standard_normal((batch, cfg.input_dim))
    y = rng.integers(0, classes, size=batch)
    err = check_gradients(model, x, y)
    logger.info(
        "gradient check on d=%d L=%d r=%d: max relative error %.3e",
        dim, layers, rank, err,
    )

    return err
