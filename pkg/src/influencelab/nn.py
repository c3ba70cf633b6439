"""Flat-parameter feed-forward classifier with exact first- and second-order derivatives.

Everything runs in float64 on plain numpy arrays. Model parameters live in a
single flat vector (ParamVector) with an explicit per-layer layout, so masks,
dot products, and vector algebra on gradients stay trivial. Second-order
quantities (Hessian-vector products and the mixed input/parameter product)
come from forward-over-reverse differentiation of the analytic backward pass;
the Hessian is never materialized here.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a fully-connected softmax classifier.

    layer_widths runs (input dim, hidden widths..., class count). The trailing
    top_layer_count affine layers form the classifier head that influence
    scoring may restrict itself to; the layers below act as the feature
    extractor.
    """

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    top_layer_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("need at least an input and an output width")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive, got {self.layer_widths}")
        if self.num_classes < 2:
            raise ValueError("class count must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")
        if not 1 <= int(self.top_layer_count) <= self.n_affine:
            raise ValueError(
                f"top_layer_count={self.top_layer_count} outside [1, {self.n_affine}]"
            )

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_affine(self) -> int:
        return len(self.layer_widths) - 1

    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        """Per affine layer: ((out, in) weight shape, (out,) bias shape)."""
        w = self.layer_widths
        return [((w[l + 1], w[l]), (w[l + 1],)) for l in range(self.n_affine)]

    def layout(self) -> tuple[tuple[int, tuple[int, ...]], ...]:
        """(offset, shape) records in storage order W0, b0, W1, b1, ..."""
        records = []
        offset = 0
        for wshape, bshape in self.layer_shapes():
            records.append((offset, wshape))
            offset += wshape[0] * wshape[1]
            records.append((offset, bshape))
            offset += bshape[0]
        return tuple(records)

    @property
    def param_count(self) -> int:
        off, shape = self.layout()[-1]
        return off + int(np.prod(shape))


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector plus its (offset, shape) layout records."""

    spec: ModelSpec
    values: np.ndarray
    layout: tuple[tuple[int, tuple[int, ...]], ...]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only (W, b) views per affine layer."""
        out = []
        for l in range(self.spec.n_affine):
            off_w, shape_w = self.layout[2 * l]
            off_b, shape_b = self.layout[2 * l + 1]
            w = self.values[off_w : off_w + shape_w[0] * shape_w[1]].reshape(shape_w)
            b = self.values[off_b : off_b + shape_b[0]]
            out.append((w, b))
        return out

    def replace(self, values: np.ndarray) -> "ParamVector":
        return make_params(self.spec, values)

    def __len__(self) -> int:
        return self.values.size


def make_params(spec: ModelSpec, values: np.ndarray) -> ParamVector:
    values = np.ascontiguousarray(values, dtype=np.float64).copy()
    if values.ndim != 1 or values.size != spec.param_count:
        raise ValueError(f"expected flat vector of length {spec.param_count}, got shape {values.shape}")
    values.setflags(write=False)
    return ParamVector(spec=spec, values=values, layout=spec.layout())


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform +-1/sqrt(fan_in) init per layer; draw order is W then b per layer."""
    chunks = []
    for (out_w, in_w), (out_b,) in spec.layer_shapes():
        bound = 1.0 / np.sqrt(in_w)
        chunks.append(rng.uniform(-bound, bound, size=out_w * in_w))
        chunks.append(rng.uniform(-bound, bound, size=out_b))
    return make_params(spec, np.concatenate(chunks))


def params_digest(params: ParamVector) -> str:
    """Content hash of a parameter vector; identifies the model snapshot.

    Memoized on the (immutable) instance: per-example influence scoring
    checks the snapshot on every call.
    """
    cached = params.__dict__.get("_digest")
    if cached is None:
        h = hashlib.sha256()
        h.update(repr(params.spec.layer_widths).encode())
        h.update(params.values.tobytes())
        cached = h.hexdigest()
        object.__setattr__(params, "_digest", cached)
    return cached


def top_layer_mask(spec: ModelSpec) -> np.ndarray:
    """Boolean mask over the flat vector covering the trailing top layers."""
    mask = np.zeros(spec.param_count, dtype=bool)
    first_top = spec.n_affine - spec.top_layer_count
    layout = spec.layout()
    for l in range(first_top, spec.n_affine):
        for off, shape in (layout[2 * l], layout[2 * l + 1]):
            mask[off : off + int(np.prod(shape))] = True
    return mask


@dataclass(frozen=True)
class Example:
    """One labelled input; every pixel must lie in [0, 1]."""

    x: np.ndarray
    y: int

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"example input must be a flat vector, got shape {x.shape}")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("example input has pixels outside [0, 1]")
        x = x.copy()
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        y = int(self.y)
        if y < 0:
            raise ValueError(f"label must be a non-negative class index, got {y}")
        object.__setattr__(self, "y", y)


def as_xy(batch) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a batch (LabeledSet-like, (X, y) pair, or sequence of Example)."""
    if hasattr(batch, "X") and hasattr(batch, "y"):
        return np.asarray(batch.X, dtype=np.float64), np.asarray(batch.y, dtype=np.int64)
    if isinstance(batch, tuple) and len(batch) == 2:
        X, y = batch
        return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)
    xs = [ex.x for ex in batch]
    ys = [ex.y for ex in batch]
    if not xs:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


# BLAS picks different kernels (and accumulation orders) by batch size, so a
# row's result can change bits when its batch grows. Degenerate batches go
# through einsum's fixed single-threaded kernel instead, which keeps per-row
# outputs independent of batch size; identities like mean-of-duplicated-
# examples == single-example gradient then hold exactly. Everything else
# stays on BLAS.
_SMALL_BATCH = 2


def _affine(A: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if A.shape[0] <= _SMALL_BATCH:
        return np.einsum("nd,od->no", A, W, optimize=False) + b
    return A @ W.T + b


def _contract_rows(D: np.ndarray, A: np.ndarray) -> np.ndarray:
    # sum_n D[n,:] (x) A[n,:]  ->  (out, in)
    if D.shape[0] <= _SMALL_BATCH:
        return np.einsum("no,nd->od", D, A, optimize=False)
    return D.T @ A


def _push_down(D: np.ndarray, W: np.ndarray) -> np.ndarray:
    # per-row cotangent through the affine map: D @ W
    if D.shape[0] <= _SMALL_BATCH:
        return np.einsum("no,od->nd", D, W, optimize=False)
    return D @ W


def _act(spec: ModelSpec, Z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(Z, 0.0)
    return np.tanh(Z)


def _act_prime(spec: ModelSpec, Z: np.ndarray, A: np.ndarray) -> np.ndarray:
    # relu'(0) := 0 by convention; tanh' uses the cached activation.
    if spec.activation == "relu":
        return (Z > 0.0).astype(np.float64)
    return 1.0 - A * A


def _forward_cache(params: ParamVector, X: np.ndarray):
    """Activations A[l] (A[0] = X) and pre-activations Z[l]; logits = Z[-1]."""
    spec = params.spec
    As = [X]
    Zs = []
    A = X
    layers = params.layers()
    for l, (W, b) in enumerate(layers):
        Z = _affine(A, W, b)
        Zs.append(Z)
        if l < spec.n_affine - 1:
            A = _act(spec, Z)
            As.append(A)
    return As, Zs


def forward(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Logits for one input vector or a (n, d) batch."""
    single = np.asarray(x).ndim == 1
    X = np.asarray(x, dtype=np.float64)
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise ValueError(f"input dim mismatch: expected {params.spec.input_dim}, got {np.asarray(x).shape}")
    _, Zs = _forward_cache(params, X)
    logits = Zs[-1]
    return logits[0] if single else logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def _check_labels(spec: ModelSpec, y: np.ndarray):
    if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
        raise ValueError(f"labels outside [0, {spec.num_classes}): {y.min()}..{y.max()}")


def loss(params: ParamVector, x: np.ndarray, y: int) -> float:
    """Cross-entropy -log softmax(logits)[y] for a single example."""
    logits = forward(params, x)[None, :]
    yarr = np.asarray([y], dtype=np.int64)
    _check_labels(params.spec, yarr)
    return float(-_log_softmax(logits)[0, y])


def batch_loss(params: ParamVector, batch) -> float:
    """Mean cross-entropy over a batch."""
    X, y = as_xy(batch)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    _check_labels(params.spec, y)
    logits = forward(params, X)
    return float(-_log_softmax(logits)[np.arange(X.shape[0]), y].mean())


def _onehot(y: np.ndarray, C: int) -> np.ndarray:
    Y = np.zeros((y.size, C))
    Y[np.arange(y.size), y] = 1.0
    return Y


def _backward(params: ParamVector, As, Zs, dlogits, *, need_params=True, need_input=False):
    """Reverse pass from a logit cotangent; returns (flat param grad, input grad rows)."""
    spec = params.spec
    layers = params.layers()
    grad = np.zeros(spec.param_count) if need_params else None
    delta = dlogits
    dX = None
    for l in range(spec.n_affine - 1, -1, -1):
        W, _ = layers[l]
        if need_params:
            off_w, shape_w = params.layout[2 * l]
            off_b, _ = params.layout[2 * l + 1]
            grad[off_w : off_w + shape_w[0] * shape_w[1]] = _contract_rows(delta, As[l]).ravel()
            grad[off_b : off_b + shape_w[0]] = delta.sum(axis=0)
        if l == 0 and not need_input:
            break
        U = _push_down(delta, W)
        if l > 0:
            delta = U * _act_prime(spec, Zs[l - 1], As[l])
        else:
            dX = U
    return grad, dX


def _apply_mask(grad: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        grad = grad * mask
    return grad


def grad_params(params: ParamVector, x: np.ndarray, y: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Exact gradient of loss(params, x, y) w.r.t. the flat parameters."""
    X = np.asarray(x, dtype=np.float64)[None, :]
    yarr = np.asarray([y], dtype=np.int64)
    _check_labels(params.spec, yarr)
    As, Zs = _forward_cache(params, X)
    dlogits = softmax(Zs[-1]) - _onehot(yarr, params.spec.num_classes)
    grad, _ = _backward(params, As, Zs, dlogits)
    return _apply_mask(grad, mask)


def mean_grad(params: ParamVector, batch, mask: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the batch-mean loss."""
    X, y = as_xy(batch)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    _check_labels(params.spec, y)
    As, Zs = _forward_cache(params, X)
    dlogits = (softmax(Zs[-1]) - _onehot(y, params.spec.num_classes)) / X.shape[0]
    grad, _ = _backward(params, As, Zs, dlogits)
    return _apply_mask(grad, mask)


def grad_input(params: ParamVector, x: np.ndarray, y: int) -> np.ndarray:
    """Exact gradient of loss(params, x, y) w.r.t. the input vector."""
    return grad_input_rows(params, np.asarray(x, dtype=np.float64)[None, :], np.asarray([y]))[0]


def grad_input_rows(params: ParamVector, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row input gradients of the per-example losses (no batch averaging)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_labels(params.spec, y)
    As, Zs = _forward_cache(params, X)
    dlogits = softmax(Zs[-1]) - _onehot(y, params.spec.num_classes)
    _, dX = _backward(params, As, Zs, dlogits, need_params=False, need_input=True)
    return dX


def backprop_to_input(params: ParamVector, X: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Input gradient rows for any scalar objective with the given logit cotangent."""
    X = np.asarray(X, dtype=np.float64)
    As, Zs = _forward_cache(params, X)
    _, dX = _backward(params, As, Zs, dlogits, need_params=False, need_input=True)
    return dX


def _rop(params: ParamVector, X, y, v, *, want_params: bool, want_input: bool, mean: bool):
    """Forward-over-reverse pass: directional derivative of the backward pass
    along the parameter direction v (Pearlmutter's trick).

    Returns (d/de grad_params, d/de per-row input grads) at e=0 for
    theta + e*v. The `mean` flag divides the parameter output by the batch
    size (Hessian of the batch-mean loss); input rows are never averaged.
    """
    spec = params.spec
    layers = params.layers()
    vparams = make_params(spec, v).layers()
    n, C = X.shape[0], spec.num_classes
    tanh = spec.activation == "tanh"

    As, RAs, Zs, RZs, Ds = [X], [np.zeros_like(X)], [], [], []
    A, RA = X, RAs[0]
    for l, (W, b) in enumerate(layers):
        Vw, vb = vparams[l]
        Z = _affine(A, W, b)
        RZ = _affine(A, Vw, vb) + _affine(RA, W, np.zeros_like(b))
        Zs.append(Z)
        RZs.append(RZ)
        if l < spec.n_affine - 1:
            A = _act(spec, Z)
            D = _act_prime(spec, Z, A)
            RA = D * RZ
            As.append(A)
            RAs.append(RA)
            Ds.append(D)

    P = softmax(Zs[-1])
    delta = P - _onehot(y, C)
    PR = P * RZs[-1]
    Rdelta = PR - P * PR.sum(axis=1, keepdims=True)

    hv = np.zeros(spec.param_count) if want_params else None
    RdX = None
    for l in range(spec.n_affine - 1, -1, -1):
        W, _ = layers[l]
        Vw, _ = vparams[l]
        if want_params:
            off_w, shape_w = params.layout[2 * l]
            off_b, _ = params.layout[2 * l + 1]
            hv[off_w : off_w + shape_w[0] * shape_w[1]] = (
                _contract_rows(Rdelta, As[l]) + _contract_rows(delta, RAs[l])
            ).ravel()
            hv[off_b : off_b + shape_w[0]] = Rdelta.sum(axis=0)
        if l == 0 and not want_input:
            break
        U = _push_down(delta, W)
        RU = _push_down(Rdelta, W) + _push_down(delta, Vw)
        if l > 0:
            D = Ds[l - 1]
            if tanh:
                # tanh''(z) = -2 tanh(z) (1 - tanh(z)^2); relu'' := 0 everywhere.
                Rdelta = RU * D + U * (-2.0 * As[l] * D) * RZs[l - 1]
            else:
                Rdelta = RU * D
            delta = U * D
        else:
            RdX = RU
    if want_params and mean:
        hv /= n
    return hv, RdX


def hvp(params: ParamVector, batch, v: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Hessian-vector product of the batch-mean loss, H v, by double differentiation.

    With a mask, H is the Hessian block over the masked coordinates only; the
    direction is masked on the way in and the product on the way out.
    """
    X, y = as_xy(batch)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    _check_labels(params.spec, y)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (params.spec.param_count,):
        raise ValueError(f"direction must have length {params.spec.param_count}")
    if mask is not None:
        v = v * mask
    hv, _ = _rop(params, X, y, v, want_params=True, want_input=False, mean=True)
    return _apply_mask(hv, mask)


def mixed_grad(params: ParamVector, x: np.ndarray, y: int, s: np.ndarray) -> np.ndarray:
    """The d-vector grad_x(s . grad_theta loss(x, y)); s spans the full network."""
    return mixed_grad_rows(params, np.asarray(x, dtype=np.float64)[None, :], np.asarray([y]), s)[0]


def mixed_grad_rows(params: ParamVector, X: np.ndarray, y: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Row-wise mixed products for a shared parameter direction s."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_labels(params.spec, y)
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (params.spec.param_count,):
        raise ValueError(f"direction must have length {params.spec.param_count}")
    _, rdx = _rop(params, X, y, s, want_params=False, want_input=True, mean=False)
    return rdx


def sgd_step(params: ParamVector, batch, learning_rate: float, mask: np.ndarray | None = None) -> ParamVector:
    """One step of params - lr * mean batch gradient (optionally masked)."""
    if learning_rate < 0:
        raise ValueError("learning rate must be non-negative")
    g = mean_grad(params, batch, mask=mask)
    return params.replace(params.values - learning_rate * g)


def features(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations (input to the last affine layer)."""
    single = np.asarray(x).ndim == 1
    X = np.asarray(x, dtype=np.float64)
    if single:
        X = X[None, :]
    As, _ = _forward_cache(params, X)
    feats = As[-1]
    return feats[0] if single else feats


def feature_input_grad(params: ParamVector, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the input of u . features(params, x)."""
    spec = params.spec
    if spec.n_affine < 2:
        raise ValueError("feature map needs at least one hidden layer")
    X = np.asarray(x, dtype=np.float64)[None, :]
    As, Zs = _forward_cache(params, X)
    layers = params.layers()
    delta = np.asarray(u, dtype=np.float64)[None, :] * _act_prime(spec, Zs[-2], As[-1])
    for l in range(spec.n_affine - 2, 0, -1):
        W, _ = layers[l]
        delta = _push_down(delta, W) * _act_prime(spec, Zs[l - 1], As[l])
    return _push_down(delta, layers[0][0])[0]


def save_params(path, params: ParamVector):
    """Text header (architecture) followed by little-endian float64 raw values."""
    spec = params.spec
    header = (
        f"ffnet-params v1 widths={','.join(str(w) for w in spec.layer_widths)} "
        f"activation={spec.activation} top_layers={spec.top_layer_count} "
        f"count={spec.param_count}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(params.values.astype("<f8").tobytes())


def load_params(path) -> ParamVector:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        blob = fh.read()
    fields = dict(tok.split("=", 1) for tok in header.split()[2:])
    spec = ModelSpec(
        layer_widths=tuple(int(w) for w in fields["widths"].split(",")),
        activation=fields["activation"],
        top_layer_count=int(fields["top_layers"]),
    )
    values = np.frombuffer(blob, dtype="<f8")
    if values.size != int(fields["count"]) or values.size != spec.param_count:
        raise ValueError(f"parameter file {path} is truncated or inconsistent")
    return make_params(spec, values.astype(np.float64))
