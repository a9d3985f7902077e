"""Dense networks with a fixed architecture vocabulary.

Two layer kinds are supported: fully-connected layers and residual
blocks of the form f(x) = x + W2 act(W1 x + b1) + b2, which reduce to
the identity when their parameters are zero. Activations are tanh,
softplus, sigmoid, or linear. Parameters live in a single flat float64
vector whose layout is fully determined by the spec, so saving,
optimizer state, and gradient packing all agree on indexing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import InvalidArgumentError, ParseError
from .tape import Var, stable_sigmoid, stable_softplus

Array = np.ndarray

_ACT_F = {
    "tanh": np.tanh,
    "softplus": stable_softplus,
    "sigmoid": stable_sigmoid,
    "linear": lambda x: x,
}

# Derivative expressed through the activation value where that is
# cheaper, through the pre-activation otherwise.
_ACT_DF = {
    "tanh": lambda pre, val: 1.0 - val * val,
    "softplus": lambda pre, val: stable_sigmoid(pre),
    "sigmoid": lambda pre, val: val * (1.0 - val),
    "linear": lambda pre, val: np.ones_like(pre),
}

_KINDS = ("fc", "residual")


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind in {fc, residual}, output width, activation name."""

    kind: str
    width: int
    activation: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidArgumentError(f"unknown layer kind {self.kind!r}")
        if self.activation not in _ACT_F:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.width < 1:
            raise InvalidArgumentError(f"layer width must be positive, got {self.width}")


@dataclass(frozen=True)
class NetworkSpec:
    """Input width plus an ordered tuple of LayerSpec."""

    n_in: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if self.n_in < 1:
            raise InvalidArgumentError(f"n_in must be positive, got {self.n_in}")
        if not self.layers:
            raise InvalidArgumentError("a network needs at least one layer")
        width = self.n_in
        for i, layer in enumerate(self.layers):
            if layer.kind == "residual" and layer.width != width:
                raise InvalidArgumentError(
                    f"residual layer {i} must preserve width {width}, got {layer.width}"
                )
            width = layer.width

    @property
    def n_out(self) -> int:
        return self.layers[-1].width


def fc(width: int, activation: str) -> LayerSpec:
    return LayerSpec("fc", width, activation)


def residual(width: int, activation: str) -> LayerSpec:
    return LayerSpec("residual", width, activation)


def mlp_spec(n_in: int, hidden: tuple[int, ...], n_out: int,
             activation: str, out_activation: str) -> NetworkSpec:
    """Plain stack of fc layers, the common case."""
    layers = [fc(h, activation) for h in hidden]
    layers.append(fc(n_out, out_activation))
    return NetworkSpec(n_in, tuple(layers))


def layer_shapes(spec: NetworkSpec) -> list[tuple[tuple[int, ...], ...]]:
    """Array shapes per layer, in flat-vector order."""
    shapes = []
    width = spec.n_in
    for layer in spec.layers:
        if layer.kind == "fc":
            shapes.append(((layer.width, width), (layer.width,)))
        else:
            shapes.append(
                ((layer.width, width), (layer.width,), (layer.width, layer.width), (layer.width,))
            )
        width = layer.width
    return shapes


def param_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) for group in layer_shapes(spec) for s in group)


@dataclass
class ParamSet:
    """Flat float64 parameter vector for one NetworkSpec."""

    values: Array

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()

    def copy(self) -> "ParamSet":
        return ParamSet(self.values.copy())


def zeros_params(spec: NetworkSpec) -> ParamSet:
    return ParamSet(np.zeros(param_count(spec)))


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamSet:
    """Uniform[-a, a] weights with a = sqrt(6 / (fan_in + fan_out)), zero biases."""
    chunks = []
    for group in layer_shapes(spec):
        for shape in group:
            if len(shape) == 2:
                fan_out, fan_in = shape
                a = np.sqrt(6.0 / (fan_in + fan_out))
                chunks.append(rng.uniform(-a, a, size=shape).ravel())
            else:
                chunks.append(np.zeros(shape))
    return ParamSet(np.concatenate(chunks))


def unpack(spec: NetworkSpec, params: ParamSet) -> list[tuple[Array, ...]]:
    """Per-layer views into the flat vector."""
    flat = params.values
    if flat.size != param_count(spec):
        raise InvalidArgumentError(
            f"parameter vector has {flat.size} entries, spec needs {param_count(spec)}"
        )
    out = []
    offset = 0
    for group in layer_shapes(spec):
        arrays = []
        for shape in group:
            n = int(np.prod(shape))
            arrays.append(flat[offset:offset + n].reshape(shape))
            offset += n
        out.append(tuple(arrays))
    return out


def _check_input(spec: NetworkSpec, x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != spec.n_in:
        raise InvalidArgumentError(
            f"input shape {x.shape} does not match network input width {spec.n_in}"
        )
    return x


def forward(spec: NetworkSpec, params: ParamSet, x: Array) -> Array:
    """Evaluate the network on a single point (1-D) or a batch of rows (2-D)."""
    x = _check_input(spec, x)
    single = x.ndim == 1
    h = x[None, :] if single else x
    for layer, arrays in zip(spec.layers, unpack(spec, params)):
        act = _ACT_F[layer.activation]
        if layer.kind == "fc":
            w, b = arrays
            h = act(h @ w.T + b)
        else:
            w1, b1, w2, b2 = arrays
            h = h + act(h @ w1.T + b1) @ w2.T + b2
    return h[0] if single else h


def _jacobian_forward(spec: NetworkSpec, params: ParamSet, x: Array) -> Array:
    val = x.copy()
    tan = np.eye(spec.n_in)
    for layer, arrays in zip(spec.layers, unpack(spec, params)):
        act, dact = _ACT_F[layer.activation], _ACT_DF[layer.activation]
        if layer.kind == "fc":
            w, b = arrays
            pre = w @ val + b
            val = act(pre)
            tan = dact(pre, val)[:, None] * (w @ tan)
        else:
            w1, b1, w2, b2 = arrays
            pre = w1 @ val + b1
            hidden = act(pre)
            tan = tan + w2 @ (dact(pre, hidden)[:, None] * (w1 @ tan))
            val = val + w2 @ hidden + b2
    return tan


def _jacobian_reverse(spec: NetworkSpec, params: ParamSet, x: Array) -> Array:
    val = x.copy()
    trail = []
    for layer, arrays in zip(spec.layers, unpack(spec, params)):
        act = _ACT_F[layer.activation]
        if layer.kind == "fc":
            w, b = arrays
            pre = w @ val + b
            val = act(pre)
            trail.append((layer, arrays, pre, val))
        else:
            w1, b1, w2, b2 = arrays
            pre = w1 @ val + b1
            hidden = act(pre)
            val = val + w2 @ hidden + b2
            trail.append((layer, arrays, pre, hidden))
    g = np.eye(spec.n_out)
    for layer, arrays, pre, post in reversed(trail):
        dact = _ACT_DF[layer.activation]
        if layer.kind == "fc":
            w, _ = arrays
            g = (g * dact(pre, post)[None, :]) @ w
        else:
            w1, _, w2, _ = arrays
            g = g + ((g @ w2) * dact(pre, post)[None, :]) @ w1
    return g


def input_jacobian(spec: NetworkSpec, params: ParamSet, x: Array) -> Array:
    """Exact d(output)/d(input) at one point, shape (n_out, n_in).

    Forward mode costs one pass per input, reverse mode one per output;
    pick whichever needs fewer passes.
    """
    x = _check_input(spec, x)
    if x.ndim != 1:
        raise InvalidArgumentError("input_jacobian expects a single point")
    if spec.n_in <= spec.n_out:
        return _jacobian_forward(spec, params, x)
    return _jacobian_reverse(spec, params, x)


def input_jacobian_batch(spec: NetworkSpec, params: ParamSet, x: Array) -> Array:
    """Forward-mode Jacobians for a batch of points, shape (B, n_out, n_in)."""
    x = _check_input(spec, x)
    if x.ndim != 2:
        raise InvalidArgumentError("input_jacobian_batch expects a batch of rows")
    val = x
    tan = np.broadcast_to(np.eye(spec.n_in), (x.shape[0], spec.n_in, spec.n_in)).copy()
    for layer, arrays in zip(spec.layers, unpack(spec, params)):
        act, dact = _ACT_F[layer.activation], _ACT_DF[layer.activation]
        if layer.kind == "fc":
            w, b = arrays
            pre = val @ w.T + b
            val = act(pre)
            tan = dact(pre, val)[:, :, None] * np.matmul(w, tan)
        else:
            w1, b1, w2, b2 = arrays
            pre = val @ w1.T + b1
            hidden = act(pre)
            ht = dact(pre, hidden)[:, :, None] * np.matmul(w1, tan)
            tan = tan + np.matmul(w2, ht)
            val = val + hidden @ w2.T + b2
    return tan


def _act_pair_var(name: str, pre: Var) -> tuple[Var, Var]:
    """Activation value and derivative as tape nodes sharing work."""
    if name == "tanh":
        t = tape.tanh(pre)
        return t, 1.0 - t * t
    if name == "softplus":
        return tape.softplus(pre), tape.sigmoid(pre)
    if name == "sigmoid":
        s = tape.sigmoid(pre)
        return s, s * (1.0 - s)
    return pre, tape.const(np.ones(pre.data.shape))


def _act_var(name: str, pre: Var) -> Var:
    if name == "tanh":
        return tape.tanh(pre)
    if name == "softplus":
        return tape.softplus(pre)
    if name == "sigmoid":
        return tape.sigmoid(pre)
    return pre


def tape_layer_params(spec: NetworkSpec, params: ParamSet) -> list[tuple[Var, ...]]:
    """Per-layer leaf nodes for the flat vector, for use with tape_forward."""
    return [tuple(tape.leaf(a) for a in group) for group in unpack(spec, params)]


def collect_param_grads(spec: NetworkSpec, leaves: list[tuple[Var, ...]]) -> Array:
    """Flatten leaf gradients back into spec layout (zeros where untouched)."""
    chunks = []
    for group in leaves:
        for v in group:
            g = v.grad if v.grad is not None else np.zeros(v.data.shape)
            chunks.append(np.asarray(g).ravel())
    return np.concatenate(chunks)


def tape_forward(spec: NetworkSpec, layer_vars, x: Var) -> Var:
    """Network applied on the tape; layer_vars comes from tape_layer_params,
    or pass a ParamSet to treat the parameters as constants."""
    if isinstance(layer_vars, ParamSet):
        layer_vars = [tuple(tape.const(a) for a in group)
                      for group in unpack(spec, layer_vars)]
    h = x
    for layer, group in zip(spec.layers, layer_vars):
        if layer.kind == "fc":
            w, b = group
            h = _act_var(layer.activation, tape.matmul(h, tape.transpose(w)) + b)
        else:
            w1, b1, w2, b2 = group
            hidden = _act_var(layer.activation, tape.matmul(h, tape.transpose(w1)) + b1)
            h = h + tape.matmul(hidden, tape.transpose(w2)) + b2
    return h


def tape_forward_jvp(spec: NetworkSpec, params: ParamSet, x: Var, v: Var) -> tuple[Var, Var]:
    """Value and Jacobian-vector product J(x) v on the tape.

    Parameters are constants here; x and v are tape nodes (batch rows),
    so the result is differentiable with respect to whatever produced
    them. This is the forward-over-reverse route the curve-energy
    objective relies on.
    """
    val = x
    tan = v
    for layer, arrays in zip(spec.layers, unpack(spec, params)):
        if layer.kind == "fc":
            w, b = arrays
            wt = tape.const(w.T.copy())
            pre = tape.matmul(val, wt) + tape.const(b)
            a, da = _act_pair_var(layer.activation, pre)
            val = a
            tan = da * tape.matmul(tan, wt)
        else:
            w1, b1, w2, b2 = arrays
            w1t = tape.const(w1.T.copy())
            w2t = tape.const(w2.T.copy())
            pre = tape.matmul(val, w1t) + tape.const(b1)
            a, da = _act_pair_var(layer.activation, pre)
            val = val + tape.matmul(a, w2t) + tape.const(b2)
            tan = tan + tape.matmul(da * tape.matmul(tan, w1t), w2t)
    return val, tan


def param_gradients(spec: NetworkSpec, params: ParamSet, inputs: Array, loss_fn) -> tuple[float, Array]:
    """Gradient of loss_fn(outputs) with respect to the flat parameters.

    loss_fn receives the network output as a tape node and must return a
    scalar tape node built from tape operations.
    """
    leaves = tape_layer_params(spec, params)
    out = tape_forward(spec, leaves, tape.const(_check_input(spec, inputs)))
    loss = loss_fn(out)
    if not isinstance(loss, Var) or loss.data.size != 1:
        raise InvalidArgumentError("loss_fn must return a scalar tape node")
    tape.backward(loss)
    return float(loss.data), collect_param_grads(spec, leaves)


_MAGIC = b"LGAL"
_VERSION = 1


def save_params(path, params: ParamSet) -> None:
    """Binary dump: magic 'LGAL', u32 version, u64 count, float64 values (LE)."""
    values = np.ascontiguousarray(params.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())


def load_params(path) -> ParamSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise ParseError(f"{path}: not a parameter file (bad magic)")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != _VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    count = struct.unpack_from("<Q", blob, 8)[0]
    expected = 16 + 8 * count
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f8", count=count, offset=16)
    return ParamSet(values.astype(np.float64))


def spec_to_json(spec: NetworkSpec) -> str:
    return json.dumps(
        {
            "n_in": spec.n_in,
            "layers": [
                {"kind": l.kind, "width": l.width, "activation": l.activation}
                for l in spec.layers
            ],
        },
        indent=2,
    )


def spec_from_json(text: str) -> NetworkSpec:
    try:
        obj = json.loads(text)
        layers = tuple(
            LayerSpec(l["kind"], int(l["width"]), l["activation"]) for l in obj["layers"]
        )
        return NetworkSpec(int(obj["n_in"]), layers)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as err:
        raise ParseError(f"bad network spec JSON: {err}") from err


def save_spec(path, spec: NetworkSpec) -> None:
    with open(path, "w") as fh:
        fh.write(spec_to_json(spec))
        fh.write("\n")


def load_spec(path) -> NetworkSpec:
    with open(path) as fh:
        return spec_from_json(fh.read())
