"""
Module: nn.py
Description: This module provides the small differentiable toolkit shared by every learner:
multilayer perceptrons with rectifier hidden layers and a linear, sigmoid or Gaussian-policy
head, exact reverse-mode gradients, an adaptive-moment optimizer, flat parameter vectors,
weighted parameter averaging for FedAvg, and the binary parameter file format.

Parameter layout: for each layer in order, the weight matrix (d_in x d_out, row-major)
followed by the bias vector (d_out).
"""

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import ConfigurationError, FileFormatError, NumericalError

logger = logging.getLogger(__name__)

ParamVector = np.ndarray

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOGIT_LIMIT = 30.0  # keeps sigmoid outputs strictly inside (0, 1)

PARAM_MAGIC = b"LFNN"
PARAM_VERSION = 1
_HEADER = struct.Struct("<4sHBH")


class HeadKind(str, Enum):
    """Output head of an Mlp."""
    linear = "linear"
    sigmoid = "sigmoid"
    gaussian = "gaussian"  # emits mean and log-std per action dimension


_HEAD_CODES = {HeadKind.linear: 0, HeadKind.sigmoid: 1, HeadKind.gaussian: 2}


class Mlp:
    """Multilayer perceptron with rectifier hidden layers."""

    def __init__(self, layer_dims: Sequence[int], head: HeadKind = HeadKind.linear,
                 weights: Optional[List[np.ndarray]] = None, biases: Optional[List[np.ndarray]] = None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ConfigurationError(f"invalid layer dims {dims}")
        head = HeadKind(head)
        if head is HeadKind.gaussian and dims[-1] % 2:
            raise ConfigurationError("a gaussian head needs an even output width (mean, log-std)")
        self.layer_dims = dims
        self.head = head
        self.weights = weights or [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])]
        self.biases = biases or [np.zeros(b) for b in dims[1:]]

    @classmethod
    def init(cls, layer_dims: Sequence[int], head: HeadKind, rng: np.random.Generator) -> "Mlp":
        """Fan-in scaled uniform initialization."""
        net = cls(layer_dims, head)
        for i, (a, b) in enumerate(zip(net.layer_dims[:-1], net.layer_dims[1:])):
            bound = 1.0 / math.sqrt(a)
            net.weights[i] = rng.uniform(-bound, bound, size=(a, b))
            net.biases[i] = rng.uniform(-bound, bound, size=b)
        return net

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def layout(self) -> List[Tuple[str, slice, Tuple[int, ...]]]:
        """(name, slice, shape) for every tensor of the flat vector."""
        out, offset = [], 0
        for i, (a, b) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            out.append((f"layer{i}.weight", slice(offset, offset + a * b), (a, b)))
            offset += a * b
            out.append((f"layer{i}.bias", slice(offset, offset + b), (b,)))
            offset += b
        return out

    def get_params(self) -> ParamVector:
        return np.concatenate([t.ravel() for pair in zip(self.weights, self.biases) for t in pair])

    def set_params(self, params: ParamVector) -> None:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.num_params,):
            raise ConfigurationError(f"expected {self.num_params} parameters, got {params.shape}")
        for name, sl, shape in self.layout():
            layer = int(name[5:name.index(".")])
            tensor = params[sl].reshape(shape).copy()
            if name.endswith("weight"):
                self.weights[layer] = tensor
            else:
                self.biases[layer] = tensor

    def copy(self) -> "Mlp":
        return Mlp(self.layer_dims, self.head, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def _as_batch(self, x) -> Tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ConfigurationError(f"input width {batch.shape[-1]} does not match {self.input_dim}")
        return batch, single

    def _affine(self, batch: np.ndarray):
        activations, pre = [batch], []
        a = batch
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = a @ w + b
            pre.append(h)
            a = np.maximum(h, 0.0) if i < len(self.weights) - 1 else h
            activations.append(a)
        return activations, pre

    def _head(self, z: np.ndarray) -> np.ndarray:
        if self.head is HeadKind.sigmoid:
            return 1.0 / (1.0 + np.exp(-np.clip(z, -LOGIT_LIMIT, LOGIT_LIMIT)))
        if self.head is HeadKind.gaussian:
            half = z.shape[1] // 2
            return np.concatenate([z[:, :half], np.clip(z[:, half:], LOG_STD_MIN, LOG_STD_MAX)], axis=1)
        return z

    def _head_grad(self, z: np.ndarray, out: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        if self.head is HeadKind.sigmoid:
            inside = np.abs(z) < LOGIT_LIMIT
            return upstream * out * (1.0 - out) * inside
        if self.head is HeadKind.gaussian:
            half = z.shape[1] // 2
            inside = (z[:, half:] > LOG_STD_MIN) & (z[:, half:] < LOG_STD_MAX)
            return np.concatenate([upstream[:, :half], upstream[:, half:] * inside], axis=1)
        return upstream

    def forward(self, x) -> np.ndarray:
        batch, single = self._as_batch(x)
        activations, _ = self._affine(batch)
        out = self._head(activations[-1])
        return out[0] if single else out

    def backward(self, x, upstream_grad) -> ParamVector:
        """Gradient of sum(upstream_grad * forward(x)) with respect to the flat parameters."""
        batch, single = self._as_batch(x)
        upstream = np.asarray(upstream_grad, dtype=float)
        upstream = upstream[None, :] if single and upstream.ndim == 1 else upstream
        if upstream.shape != (batch.shape[0], self.output_dim):
            raise ConfigurationError(f"upstream shape {upstream.shape} does not match output")
        activations, pre = self._affine(batch)
        z = activations[-1]
        grad = self._head_grad(z, self._head(z), upstream)
        grads_w, grads_b = [None] * len(self.weights), [None] * len(self.weights)
        for i in reversed(range(len(self.weights))):
            grads_w[i] = activations[i].T @ grad
            grads_b[i] = grad.sum(axis=0)
            if i > 0:
                grad = (grad @ self.weights[i].T) * (pre[i - 1] > 0)
        return np.concatenate([t.ravel() for pair in zip(grads_w, grads_b) for t in pair])


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch."""
    return net.forward(x)


def backward(net: Mlp, x, upstream_grad) -> ParamVector:
    """Reverse-mode gradient of the contraction <upstream_grad, forward(net, x)>."""
    return net.backward(x, upstream_grad)


@dataclass
class OptimizerState:
    """Adaptive-moment optimizer state."""
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0
    layout: List[Tuple[str, slice]] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp, lr: float = 3e-4) -> "OptimizerState":
        n = net.num_params
        return cls(lr=lr, m=np.zeros(n), v=np.zeros(n), layout=[(name, sl) for name, sl, _ in net.layout()])


def _offending_layer(opt: OptimizerState, grad: np.ndarray) -> str:
    bad = np.flatnonzero(~np.isfinite(grad))
    for name, sl in opt.layout:
        if sl.start <= bad[0] < sl.stop:
            return name
    return f"index {bad[0]}"


def step(opt: OptimizerState, params: ParamVector, grad: ParamVector) -> ParamVector:
    """
    One adaptive-moment update.

    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
    params <- params - lr * m_hat / (sqrt(v_hat) + eps), with bias-corrected m_hat, v_hat.

    Raises:
        ConfigurationError: If shapes differ.
        NumericalError: If the gradient holds non-finite values.
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if opt.m is None:
        opt.m, opt.v = np.zeros_like(params), np.zeros_like(params)
    if grad.shape != params.shape or opt.m.shape != params.shape:
        raise ConfigurationError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient in {_offending_layer(opt, grad)}")
    opt.t += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad ** 2
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.t)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.t)
    return params - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def weighted_average(params: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """
    Convex combination of parameter vectors.

    Raises:
        ConfigurationError: If lengths differ, a weight is negative, or weights do not sum to 1.
    """
    if not params or len(params) != len(weights):
        raise ConfigurationError("need one weight per parameter vector")
    shapes = {np.shape(p) for p in params}
    if len(shapes) != 1:
        raise ConfigurationError(f"parameter vectors have mismatched lengths {sorted(shapes)}")
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"weights must be nonnegative and sum to 1, got {w.sum()}")
    out = np.zeros(shapes.pop())
    for p, wi in zip(params, w):
        out = out + wi * np.asarray(p, dtype=float)
    return out


def params_hash(params: ParamVector) -> str:
    """sha256 of the little-endian float64 bytes."""
    return hashlib.sha256(np.asarray(params, dtype="<f8").tobytes()).hexdigest()


def save_params(path, net: Mlp) -> Path:
    """
    Write a parameter file: header (magic, version, head code, number of dims), the dims as
    little-endian uint32, then the flat parameters as little-endian float64.

    Raises:
        FileFormatError: If the file cannot be written.
    """
    path = Path(path)
    header = _HEADER.pack(PARAM_MAGIC, PARAM_VERSION, _HEAD_CODES[net.head], len(net.layer_dims))
    dims = struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + dims + np.asarray(net.get_params(), dtype="<f8").tobytes())
    except OSError as e:
        raise FileFormatError(path, f"cannot write parameters: {e}") from e
    return path


def load_params(path) -> Mlp:
    """
    Read a parameter file written by save_params.

    Raises:
        FileFormatError: If the file is missing, truncated or not a parameter file.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FileFormatError(path, f"cannot read parameters: {e}") from e
    if len(data) < _HEADER.size:
        raise FileFormatError(path, "truncated header")
    magic, version, head_code, n_dims = _HEADER.unpack_from(data)
    if magic != PARAM_MAGIC or version != PARAM_VERSION:
        raise FileFormatError(path, "not a parameter file")
    offset = _HEADER.size
    if len(data) < offset + 4 * n_dims:
        raise FileFormatError(path, "truncated layer dimensions")
    dims = list(struct.unpack_from(f"<{n_dims}I", data, offset))
    offset += 4 * n_dims
    head = {code: kind for kind, code in _HEAD_CODES.items()}.get(head_code)
    if head is None:
        raise FileFormatError(path, f"unknown head code {head_code}")
    if (len(data) - offset) % 8:
        raise FileFormatError(path, "parameter block is not a whole number of float64 values")
    body = np.frombuffer(data, dtype="<f8", offset=offset)
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if body.size != expected:
        raise FileFormatError(path, f"expected {expected} parameters, found {body.size}")
    try:
        net = Mlp(dims, head)
    except ConfigurationError as e:
        raise FileFormatError(path, f"invalid network layout {dims}: {e}") from e
    net.set_params(body.astype(float))
    return net
