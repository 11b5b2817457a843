"""Model description, parameter store, and the forward/backward passes.

A model is a stack of 3x3 conv layers (ReLU + 2x2 max pool each), then
dense ReLU layers, then a linear output layer. A subset of the non-output
layers are *extraction points*: their (post-activation, post-pool)
outputs are exported flattened, one row per sample, so a regularizer can
attach projection heads to them. The backward pass accepts gradient
contributions at the logits and at every extraction point simultaneously.

Projection-head parameters (one 2-layer MLP per extraction point) live in
the same ModelState as the backbone so that the whole thing aggregates
and serializes as one unit; the head forward/backward lives in
`fedreg.reprreg`.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from fedreg.errors import ConfigError, NumericError
from fedreg.nn import layers as L


@dataclass(frozen=True)
class Conv:
    channels: int
    kernel: int = 3


@dataclass(frozen=True)
class Dense:
    width: int


@dataclass(frozen=True)
class Output:
    classes: int


@dataclass(frozen=True)
class ModelSpec:
    """Layer stack plus extraction-point and projection-head geometry."""

    input_shape: tuple[int, int, int]  # (C, H, W)
    layers: tuple
    extraction_points: tuple[int, ...]
    projection_dim: int = 256

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], Output):
            raise ConfigError("last layer must be an Output layer")
        if any(isinstance(l, Output) for l in self.layers[:-1]):
            raise ConfigError("Output layer only allowed in last position")
        pts = self.extraction_points
        if len(pts) < 1:
            raise ConfigError("need at least one extraction point")
        if list(pts) != sorted(set(pts)):
            raise ConfigError("extraction_points must be strictly increasing")
        if pts[0] < 0 or pts[-1] >= len(self.layers) - 1:
            raise ConfigError("extraction_points must index conv/dense layers")
        for l in self.layers:
            if isinstance(l, Conv) and (l.kernel % 2 == 0 or l.kernel < 1):
                raise ConfigError(f"conv kernel must be odd, got {l.kernel}")
        if self.projection_dim < 1:
            raise ConfigError("projection_dim must be >= 1")
        self.layer_output_shapes()  # validates spatial feasibility

    @property
    def n_extraction(self) -> int:
        return len(self.extraction_points)

    @property
    def class_count(self) -> int:
        return self.layers[-1].classes

    def layer_output_shapes(self) -> list[tuple]:
        """Per-layer output shape (batch dim omitted), after pooling for convs."""
        shapes = []
        c, h, w = self.input_shape
        flat = None
        for layer in self.layers:
            if isinstance(layer, Conv):
                if flat is not None:
                    raise ConfigError("conv layer after dense layer")
                c, h, w = layer.channels, h // 2, w // 2
                if h < 1 or w < 1:
                    raise ConfigError("spatial dims pooled away; too many conv layers")
                shapes.append((c, h, w))
            elif isinstance(layer, Dense):
                flat = layer.width
                shapes.append((flat,))
            else:
                shapes.append((layer.classes,))
        return shapes

    def extraction_dims(self) -> list[int]:
        """Flattened width of each extraction point's output."""
        shapes = self.layer_output_shapes()
        return [int(np.prod(shapes[i])) for i in self.extraction_points]

    def head_dims(self, k: int) -> tuple[int, int, int]:
        """(input, hidden, output) widths of projection head k.

        Hidden width equals the input width, capped at 256.
        """
        d = self.extraction_dims()[k]
        return d, min(d, 256), self.projection_dim

    def param_shapes(self) -> dict[str, tuple]:
        """Canonical parameter order: backbone layers, then heads."""
        shapes: dict[str, tuple] = {}
        c, h, w = self.input_shape
        in_dim = None
        out_shapes = self.layer_output_shapes()
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                shapes[f"layer{i}.w"] = (layer.channels, c, layer.kernel, layer.kernel)
                shapes[f"layer{i}.b"] = (layer.channels,)
                c, h, w = out_shapes[i]
            else:
                if in_dim is None:
                    in_dim = c * h * w
                width = layer.width if isinstance(layer, Dense) else layer.classes
                shapes[f"layer{i}.w"] = (width, in_dim)
                shapes[f"layer{i}.b"] = (width,)
                in_dim = width
        for k in range(self.n_extraction):
            d, hid, out = self.head_dims(k)
            shapes[f"head{k}.w1"] = (hid, d)
            shapes[f"head{k}.b1"] = (hid,)
            shapes[f"head{k}.w2"] = (out, hid)
            shapes[f"head{k}.b2"] = (out,)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


def default_cnn_spec(
    input_shape: tuple[int, int, int] = (3, 32, 32),
    classes: int = 10,
    conv_channels: tuple[int, ...] = (8, 16, 32),
    dense_widths: tuple[int, ...] = (128, 96),
    extraction_points: tuple[int, ...] | None = None,
    projection_dim: int = 256,
) -> ModelSpec:
    """The small CNN used throughout: 3x3 convs (ReLU + 2x2 pool), two
    ReLU dense layers, linear output; every conv/dense layer is an
    extraction point unless told otherwise."""
    layers = tuple(Conv(ch) for ch in conv_channels) + tuple(
        Dense(wd) for wd in dense_widths
    ) + (Output(classes),)
    if extraction_points is None:
        extraction_points = tuple(range(len(layers) - 1))
    return ModelSpec(
        input_shape=tuple(input_shape),
        layers=layers,
        extraction_points=tuple(extraction_points),
        projection_dim=projection_dim,
    )


@dataclass
class ModelState:
    """Flat, name-indexed parameter store (float64 arrays)."""

    params: dict[str, np.ndarray]

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.params.items()})

    def allclose(self, other: "ModelState", rtol=0.0, atol=0.0) -> bool:
        if self.params.keys() != other.params.keys():
            return False
        return all(
            np.allclose(self.params[k], other.params[k], rtol=rtol, atol=atol)
            for k in self.params
        )


def init_state(spec: ModelSpec, rng: np.random.Generator) -> ModelState:
    """He-uniform weights (fan-in scaled); biases uniform in +-1/sqrt(fan_in).

    Draw order follows the canonical parameter order, so a given
    (spec, rng state) pair always produces the same initialization.
    """
    params: dict[str, np.ndarray] = {}
    fan_in = 1
    for name, shape in spec.param_shapes().items():
        if len(shape) > 1:  # weight
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
        else:  # bias of the preceding weight
            bound = 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return ModelState(params)


@dataclass
class ForwardTrace:
    """Everything backward() needs: per-layer caches plus the extraction
    outputs (flattened, post-activation/pool)."""

    spec: ModelSpec
    batch_size: int
    layer_caches: list
    extraction_outputs: list[np.ndarray] = field(default_factory=list)


def _check_finite(arr: np.ndarray, layer: int):
    if not np.isfinite(arr).all():
        raise NumericError("non-finite activation", layer=layer)


def forward(
    spec: ModelSpec,
    state: ModelState,
    batch: np.ndarray,
    need_trace: bool = True,
):
    """Run the backbone on `batch` (B, C, H, W).

    Returns (logits, extraction_outputs, trace); trace is None when
    need_trace is False (used for frozen models).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:] != spec.input_shape:
        raise ConfigError(
            f"batch shape {batch.shape} does not match spec input {spec.input_shape}"
        )
    B = batch.shape[0]
    h = batch
    caches = [] if need_trace else None
    exts = []
    ext_set = set(spec.extraction_points)
    for i, layer in enumerate(spec.layers):
        w = state.params[f"layer{i}.w"]
        b = state.params[f"layer{i}.b"]
        if isinstance(layer, Conv):
            if w.shape[1] != h.shape[1]:
                raise ConfigError(f"layer {i}: state does not match spec")
            pre, conv_cache = L.conv2d_forward(h, w, b)
            act = np.maximum(pre, 0.0)
            h, pool_cache = L.maxpool2_forward(act)
            if need_trace:
                caches.append(("conv", conv_cache, pre > 0, pool_cache))
        else:
            flat_from = h.shape
            if h.ndim > 2:
                h = h.reshape(B, -1)
            if w.shape[1] != h.shape[1]:
                raise ConfigError(f"layer {i}: state does not match spec")
            pre, x_cache = L.dense_forward(h, w, b)
            if isinstance(layer, Dense):
                h = np.maximum(pre, 0.0)
                if need_trace:
                    caches.append(("dense", (x_cache, w), pre > 0, flat_from))
            else:
                h = pre
                if need_trace:
                    caches.append(("output", (x_cache, w), None, flat_from))
        _check_finite(h, i)
        if i in ext_set:
            exts.append(h.reshape(B, -1))
    trace = ForwardTrace(spec, B, caches, exts) if need_trace else None
    return h, exts, trace


def zero_grads(spec: ModelSpec) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in spec.param_shapes().items()}


def backward(
    trace: ForwardTrace,
    dlogits: np.ndarray,
    dextractions: list[np.ndarray | None] | None = None,
) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss w.r.t. backbone parameters.

    `dlogits` is dLoss/dlogits; `dextractions[k]` (optional, entries may be
    None) is dLoss/d(extraction k) in the flattened layout. Head parameter
    entries come back as zeros, to be filled by whoever owns the heads.
    """
    spec = trace.spec
    if trace.layer_caches is None or len(trace.layer_caches) != len(spec.layers):
        raise ConfigError("trace does not match spec")
    if dlogits.shape != (trace.batch_size, spec.class_count):
        raise ConfigError(f"dlogits shape {dlogits.shape} does not match trace")
    if dextractions is not None and len(dextractions) != spec.n_extraction:
        raise ConfigError("one upstream gradient required per extraction point")
    grads = zero_grads(spec)
    ext_index = {layer_i: k for k, layer_i in enumerate(spec.extraction_points)}
    g = np.asarray(dlogits, dtype=np.float64)
    for i in range(len(spec.layers) - 1, -1, -1):
        kind, cache, mask, extra = trace.layer_caches[i]
        if i in ext_index and dextractions is not None:
            dext = dextractions[ext_index[i]]
            if dext is not None:
                g = g + dext.reshape(g.shape)
        if kind == "conv":
            g = L.maxpool2_backward(g, extra)
            g = g * mask
            g, dw, db = L.conv2d_backward(g, cache)
        else:
            x_cache, w = cache
            if kind == "dense":
                g = g * mask
            g, dw, db = L.dense_backward(g, x_cache, w)
            if len(extra) > 2:
                g = g.reshape(extra)
        grads[f"layer{i}.w"] = dw
        grads[f"layer{i}.b"] = db
    return grads


def state_to_bytes(spec: ModelSpec, state: ModelState) -> bytes:
    """Flat little-endian float64 blob in canonical parameter order."""
    return b"".join(
        np.ascontiguousarray(state.params[name], dtype="<f8").tobytes()
        for name in spec.param_shapes()
    )


def state_from_bytes(spec: ModelSpec, blob: bytes) -> ModelState:
    expected = spec.param_count() * 8
    if len(blob) != expected:
        raise ConfigError(f"blob has {len(blob)} bytes, spec expects {expected}")
    params = {}
    offset = 0
    for name, shape in spec.param_shapes().items():
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
        params[name] = arr.astype(np.float64).reshape(shape)
        offset += n * 8
    return ModelState(params)
