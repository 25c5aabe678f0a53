"""Parameterized layers and models on top of the autodiff core.

A model is an ordered sequence of layers, input side first. Layers with
parameters expose them as named float64 arrays; that ordering is what the
cascading-randomization walk and the checkpoint format rely on. Models are
treated as frozen after construction or training: anything that needs to
alter parameters works on a ``clone()``.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from . import autodiff as ad


class Layer:
    """Base layer: a name, optional parameters, and a graph-builder."""

    name: str

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        pass

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def apply(self, x: ad.Var, pvars: dict[str, ad.Var]) -> ad.Var:
        raise NotImplementedError

    def clone(self) -> "Layer":
        raise NotImplementedError


def _he_weight(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _uniform_bias(rng, n, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n)


class Conv2d(Layer):
    def __init__(self, name, in_ch, out_ch, kernel, stride=1, padding=0):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.weight = np.zeros((out_ch, in_ch, kernel, kernel))
        self.bias = np.zeros(out_ch)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def set_params(self, values):
        self.weight = np.ascontiguousarray(values["weight"], dtype=np.float64)
        self.bias = np.ascontiguousarray(values["bias"], dtype=np.float64)

    def init_params(self, rng):
        fan_in = self.in_ch * self.kernel * self.kernel
        self.weight = _he_weight(rng, self.weight.shape, fan_in)
        self.bias = _uniform_bias(rng, self.out_ch, fan_in)

    def apply(self, x, pvars):
        try:
            return ad.conv2d(
                x,
                pvars[f"{self.name}.weight"],
                pvars[f"{self.name}.bias"],
                stride=self.stride,
                padding=self.padding,
            )
        except ad.ShapeError as err:
            raise ad.ShapeError(f"layer {self.name!r}: {err}") from err

    def clone(self):
        c = Conv2d(self.name, self.in_ch, self.out_ch, self.kernel, self.stride, self.padding)
        c.weight = self.weight.copy()
        c.bias = self.bias.copy()
        return c


class Dense(Layer):
    def __init__(self, name, in_features, out_features):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features))
        self.bias = np.zeros(out_features)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def set_params(self, values):
        self.weight = np.ascontiguousarray(values["weight"], dtype=np.float64)
        self.bias = np.ascontiguousarray(values["bias"], dtype=np.float64)

    def init_params(self, rng):
        self.weight = _he_weight(rng, self.weight.shape, self.in_features)
        self.bias = _uniform_bias(rng, self.out_features, self.in_features)

    def apply(self, x, pvars):
        try:
            return ad.dense(x, pvars[f"{self.name}.weight"], pvars[f"{self.name}.bias"])
        except ad.ShapeError as err:
            raise ad.ShapeError(f"layer {self.name!r}: {err}") from err

    def clone(self):
        c = Dense(self.name, self.in_features, self.out_features)
        c.weight = self.weight.copy()
        c.bias = self.bias.copy()
        return c


_ACTIVATIONS = {"relu": ad.relu, "silu": ad.silu, "sigmoid": ad.sigmoid}


class Activation(Layer):
    def __init__(self, name, kind):
        if kind not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.name = name
        self.kind = kind

    def apply(self, x, pvars):
        return _ACTIVATIONS[self.kind](x)

    def clone(self):
        return Activation(self.name, self.kind)


class MaxPool(Layer):
    def __init__(self, name, k=2, stride=None):
        self.name = name
        self.k = k
        self.stride = stride if stride is not None else k

    def apply(self, x, pvars):
        try:
            return ad.max_pool(x, self.k, self.stride)
        except ad.ShapeError as err:
            raise ad.ShapeError(f"layer {self.name!r}: {err}") from err

    def clone(self):
        return MaxPool(self.name, self.k, self.stride)


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name

    def apply(self, x, pvars):
        return ad.reshape(x, (x.shape[0], -1))

    def clone(self):
        return Flatten(self.name)


class GraphHandles:
    """Leaves of one recorded forward pass: the input and every parameter."""

    def __init__(self, input_var: ad.Var, param_vars: dict[str, ad.Var]):
        self.input = input_var
        self.params = param_vars


class Model:
    """Ordered layer stack with a differentiable forward pass."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...]):
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.layers = layers
        self.input_shape = tuple(input_shape)

    # -- structure ---------------------------------------------------------

    def param_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.params()]

    def param_count(self) -> int:
        return sum(l.param_count() for l in self.layers)

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for pname, arr in layer.params().items():
                out[f"{layer.name}.{pname}"] = arr
        return out

    def clone(self) -> "Model":
        return self._rebuild([l.clone() for l in self.layers])

    def _rebuild(self, layers: list[Layer]) -> "Model":
        return Model(layers, self.input_shape)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.describe(), sort_keys=True).encode())
        for name, arr in self.named_params().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def describe(self) -> dict:
        return {
            "kind": type(self).__name__,
            "input_shape": list(self.input_shape),
            "layers": [
                {"name": l.name, "type": type(l).__name__, "params": sorted(l.params())}
                for l in self.layers
            ],
        }

    # -- execution ---------------------------------------------------------

    def _check_input(self, x: np.ndarray):
        if tuple(x.shape) != self.input_shape:
            raise ad.ShapeError(
                f"model input shape {tuple(x.shape)} != declared {self.input_shape}"
            )

    def _param_vars(self, requires_grad: bool) -> dict[str, ad.Var]:
        return {
            name: ad.leaf(arr, requires_grad=requires_grad, name=name)
            for name, arr in self.named_params().items()
        }

    def forward_graph(
        self, x: np.ndarray, input_grad: bool = True, param_grad: bool = True
    ) -> tuple[ad.Var, GraphHandles]:
        self._check_input(np.asarray(x))
        inp = ad.leaf(x, requires_grad=input_grad, name="input")
        pvars = self._param_vars(param_grad)
        out = inp
        for layer in self.layers:
            out = layer.apply(out, pvars)
        return out, GraphHandles(inp, pvars)

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_graph(x)
        return out.value


class DetectorModel(Model):
    """Shared backbone with separate classification and box heads.

    ``forward_graph`` returns ``(cls, box)`` Vars with shapes
    (1, n_classes + 1, G, G) and (1, 4, G, G). The two head layers sit at
    the end of ``layers`` and count as the output side for the
    cascading-randomization walk.
    """

    def __init__(self, trunk: list[Layer], cls_head: Layer, box_head: Layer, input_shape):
        super().__init__(trunk + [cls_head, box_head], input_shape)
        self.trunk = trunk
        self.cls_head = cls_head
        self.box_head = box_head

    def _rebuild(self, layers):
        return DetectorModel(layers[:-2], layers[-2], layers[-1], self.input_shape)

    def forward_graph(self, x, input_grad: bool = True, param_grad: bool = True):
        self._check_input(np.asarray(x))
        inp = ad.leaf(x, requires_grad=input_grad, name="input")
        pvars = self._param_vars(param_grad)
        feat = inp
        for layer in self.trunk:
            feat = layer.apply(feat, pvars)
        cls = self.layers[-2].apply(feat, pvars)
        box = self.layers[-1].apply(feat, pvars)
        return (cls, box), GraphHandles(inp, pvars)

    def forward(self, x):
        (cls, box), _ = self.forward_graph(x)
        return cls.value, box.value


def forward(model: Model, x: np.ndarray, record: bool = False):
    """Run a model; optionally return the ComputationRecord of the output.

    For multi-output models the record is built from the first output.
    """
    out, handles = model.forward_graph(x)
    first = out[0] if isinstance(out, tuple) else out
    values = tuple(o.value for o in out) if isinstance(out, tuple) else out.value
    if record:
        return values, ad.ComputationRecord(first), handles
    return values
