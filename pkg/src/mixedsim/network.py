"""Small numpy network engine with hand-written gradients.

Layers operate on NHWC images or (N, features) matrices.  Synaptic layers
(``Conv2D`` and ``Dense``) keep their weights as a ``(fan_in, fan_out)``
matrix so that every imperfection hook sees the same vector-matrix product
``cols @ W`` regardless of layer type.

Imperfections are injected through a *hardware view*: any object with

* ``weight(i, W) -> W_eff``: weights actually realised for synaptic layer ``i``
* ``post(i, cols, y, sample_ids) -> y``: output-side effects (nonlinearity,
  noise, compensation offsets)

``ImperfectionStack.realize`` builds one.  Weight perturbations are
straight-through: gradients computed with ``W_eff`` are applied to ``W``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .rng import make_rng

FORMAT_NAME = "mixedsim.network"
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


# -- layers ---------------------------------------------------------------------


class Layer:
    kind = "layer"
    params: dict = {}

    def forward(self, x, train=False, view=None, sample_ids=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def grads(self) -> dict:
        return {}

    def to_record(self) -> dict:
        return {"type": self.kind}


def _im2col(x, k, pad):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))  # n, h, w, c, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, k * k * c)


def _col2im(dcols, shape, k, pad):
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += d[:, :, :, i, j, :]
    return dxp[:, pad:pad + h, pad:pad + w, :]


class _Synaptic(Layer):
    """Shared logic of layers computing ``cols @ W``."""

    index = -1  # position among synaptic layers, set by Network

    def __init__(self, W):
        self.W = np.asarray(W, dtype=float)
        self.x_range = 1.0  # calibrated input range (x_max)
        self.clip = None  # optional saturation bound on the input
        self.dW = np.zeros_like(self.W)

    @property
    def fan_in(self):
        return self.W.shape[0]

    @property
    def fan_out(self):
        return self.W.shape[1]

    @property
    def x_max(self) -> float:
        return float(self.clip) if self.clip is not None else float(self.x_range)

    def params_dict(self):
        return {"W": self.W}

    def grads(self):
        return {"W": self.dW}

    def _input(self, x):
        if self.clip is None:
            self._clip_mask = None
            return x
        self._clip_mask = x <= self.clip
        return np.minimum(x, self.clip)

    def _matmul(self, cols, view, sample_ids):
        W_eff = view.weight(self.index, self.W) if view is not None else self.W
        y = cols @ W_eff
        if view is not None:
            y = view.post(self.index, cols, y, sample_ids)
        self._cols, self._W_eff = cols, W_eff
        return y

    def _grad_input(self, dx):
        return dx if self._clip_mask is None else dx * self._clip_mask

    def _extra_record(self):
        return {"x_range": self.x_range, "clip": self.clip}


class Dense(_Synaptic):
    kind = "dense"

    def forward(self, x, train=False, view=None, sample_ids=None):
        x = self._input(x)
        return self._matmul(x, view, sample_ids)

    def backward(self, dout):
        self.dW = self._cols.T @ dout
        return self._grad_input(dout @ self._W_eff.T)

    def to_record(self):
        return {"type": self.kind, "in": self.fan_in, "out": self.fan_out, "W": self.W.tolist(), **self._extra_record()}


class Conv2D(_Synaptic):
    """Stride-1 'same' convolution; weight rows ordered (kh, kw, in_ch)."""

    kind = "conv"

    def __init__(self, W, in_ch, kernel=5):
        super().__init__(W)
        self.in_ch = in_ch
        self.kernel = kernel
        if self.W.shape[0] != kernel * kernel * in_ch:
            raise ValueError("conv weight rows must equal kernel*kernel*in_ch")

    def forward(self, x, train=False, view=None, sample_ids=None):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ValueError(f"conv expects NHWC input with {self.in_ch} channels, got {x.shape}")
        x = self._input(x)
        n, h, w, _ = x.shape
        self._shape = x.shape
        cols = _im2col(x, self.kernel, self.kernel // 2)
        ids = None if sample_ids is None else np.repeat(sample_ids, h * w)
        y = self._matmul(cols, view, ids)
        return y.reshape(n, h, w, self.fan_out)

    def backward(self, dout):
        d = dout.reshape(-1, self.fan_out)
        self.dW = self._cols.T @ d
        dcols = d @ self._W_eff.T
        return self._grad_input(_col2im(dcols, self._shape, self.kernel, self.kernel // 2))

    def to_record(self):
        return {"type": self.kind, "in_ch": self.in_ch, "kernel": self.kernel, "out": self.fan_out,
                "W": self.W.tolist(), **self._extra_record()}


class BatchNorm(Layer):
    """Per-channel normalisation over every axis but the last."""

    kind = "batchnorm"

    def __init__(self, n, momentum=0.1, eps=1e-5):
        self.gamma = np.ones(n)
        self.beta = np.zeros(n)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.momentum = momentum
        self.eps = eps
        self.override = None  # folded (scale, shift) used in eval mode when set
        self.dgamma = np.zeros(n)
        self.dbeta = np.zeros(n)

    def params_dict(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.dgamma, "beta": self.dbeta}

    def folded(self):
        """Eval-mode affine map as (scale, shift)."""
        if self.override is not None:
            return self.override
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return scale, self.beta - self.running_mean * scale

    def forward(self, x, train=False, view=None, sample_ids=None):
        shape = x.shape
        x2 = x.reshape(-1, shape[-1])
        if train:
            mu = x2.mean(axis=0)
            var = x2.var(axis=0)
            m = x2.shape[0]
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var * m / max(m - 1, 1)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x2 - mu) * inv
            self._cache = (xhat, inv)
            return (self.gamma * xhat + self.beta).reshape(shape)
        scale, shift = self.folded()
        self._cache = None
        self._scale = scale
        return (x2 * scale + shift).reshape(shape)

    def backward(self, dout):
        shape = dout.shape
        d = dout.reshape(-1, shape[-1])
        if self._cache is None:
            self.dgamma = np.zeros_like(self.gamma)
            self.dbeta = np.zeros_like(self.beta)
            return (d * self._scale).reshape(shape)
        xhat, inv = self._cache
        self.dbeta = d.sum(axis=0)
        self.dgamma = (d * xhat).sum(axis=0)
        dxhat = d * self.gamma
        m = d.shape[0]
        dx = inv / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx.reshape(shape)

    def to_record(self):
        return {"type": self.kind, "n": len(self.gamma), "momentum": self.momentum, "eps": self.eps,
                "gamma": self.gamma.tolist(), "beta": self.beta.tolist(),
                "running_mean": self.running_mean.tolist(), "running_var": self.running_var.tolist()}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, view=None, sample_ids=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class MaxPool2(Layer):
    kind = "maxpool"

    def forward(self, x, train=False, view=None, sample_ids=None):
        n, h, w, c = x.shape
        blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        idx = blocks.argmax(axis=-1)
        self._idx, self._shape = idx, x.shape
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        n, h, w, c = self._shape
        blocks = np.zeros((n, h // 2, w // 2, c, 4))
        np.put_along_axis(blocks, self._idx[..., None], dout[..., None], axis=-1)
        return blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(self._shape)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, view=None, sample_ids=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


# -- network ----------------------------------------------------------------------


class Network:
    """Ordered layer list; the last layer's output is the logits."""

    def __init__(self, layers):
        self.layers = list(layers)
        k = 0
        for layer in self.layers:
            if isinstance(layer, _Synaptic):
                layer.index = k
                k += 1

    @property
    def synaptic(self) -> list:
        return [l for l in self.layers if isinstance(l, _Synaptic)]

    @property
    def batchnorms(self) -> list:
        return [l for l in self.layers if isinstance(l, BatchNorm)]

    def bn_after(self, i: int) -> BatchNorm | None:
        """First batch-norm layer following synaptic layer ``i``."""
        seen = False
        for layer in self.layers:
            if seen and isinstance(layer, BatchNorm):
                return layer
            if seen and isinstance(layer, _Synaptic):
                return None
            if isinstance(layer, _Synaptic) and layer.index == i:
                seen = True
        return None

    def op_counts(self, input_shape=(16, 16, 1)) -> list[int]:
        """Multiply-accumulate count per synaptic layer for one sample."""
        out = []
        x = np.zeros((1, *input_shape))
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                out.append(x.shape[1] * x.shape[2] * layer.W.size)
            elif isinstance(layer, Dense):
                out.append(layer.W.size)
            x = layer.forward(x)
        return out

    def forward(self, x, train=False, view=None, sample_ids=None, taps=None):
        """Run the network; ``taps`` (a dict) collects synaptic-layer preactivations."""
        x = np.asarray(x, dtype=float)
        if sample_ids is None:
            sample_ids = np.arange(x.shape[0])
        for layer in self.layers:
            x = layer.forward(x, train=train, view=view, sample_ids=sample_ids)
            if taps is not None and isinstance(layer, _Synaptic):
                taps[layer.index] = x
        return x

    def backward(self, dlogits):
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def parameters(self):
        """(layer, name, array) triples for trainable arrays."""
        for layer in self.layers:
            if isinstance(layer, (_Synaptic, BatchNorm)):
                for name, arr in layer.params_dict().items():
                    yield layer, name, arr

    def copy(self) -> "Network":
        return network_from_record(network_to_record(self))

    def calibrate_ranges(self, X, batch_size=512):
        """Set each synaptic layer's input range to the largest activation seen on ``X``."""
        highs = np.zeros(len(self.synaptic))
        for start in range(0, len(X), batch_size):
            x = np.asarray(X[start:start + batch_size], dtype=float)
            for layer in self.layers:
                if isinstance(layer, _Synaptic):
                    highs[layer.index] = max(highs[layer.index], float(x.max()))
                x = layer.forward(x)
        for layer in self.synaptic:
            layer.x_range = float(highs[layer.index]) if highs[layer.index] > 0 else 1.0
        return highs


def build_mini_convnet(seed=0, channels=(8, 16), hidden=64, classes=10, image=16, in_ch=1, kernel=5) -> Network:
    """conv-BN-ReLU-pool x2, dense-BN-ReLU, dense-BN (He-normal weights, no biases)."""
    def he(fan_in, fan_out, idx):
        return make_rng(seed, "network.init", idx).normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))

    c1, c2 = channels
    flat = (image // 4) ** 2 * c2
    return Network([
        Conv2D(he(kernel * kernel * in_ch, c1, 0), in_ch, kernel), BatchNorm(c1), ReLU(), MaxPool2(),
        Conv2D(he(kernel * kernel * c1, c2, 1), c1, kernel), BatchNorm(c2), ReLU(), MaxPool2(),
        Flatten(),
        Dense(he(flat, hidden, 2)), BatchNorm(hidden), ReLU(),
        Dense(he(hidden, classes, 3)), BatchNorm(classes),
    ])


def build_mlp(sizes, seed=0) -> Network:
    """Dense-BN-ReLU stack; the final dense layer is followed by BN only."""
    layers = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = make_rng(seed, "network.init", k).normal(0.0, np.sqrt(2.0 / a), (a, b))
        layers += [Dense(W), BatchNorm(b)]
        if k < len(sizes) - 2:
            layers.append(ReLU())
    return Network(layers)


# -- serialisation ------------------------------------------------------------------


def network_to_record(net: Network) -> dict:
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "layers": [l.to_record() for l in net.layers]}


def network_from_record(rec: dict) -> Network:
    if rec.get("format") != FORMAT_NAME or rec.get("version") != FORMAT_VERSION:
        raise ValueError("unsupported network document")
    layers = []
    for r in rec["layers"]:
        kind = r["type"]
        if kind == "dense":
            layer = Dense(np.array(r["W"], dtype=float))
        elif kind == "conv":
            layer = Conv2D(np.array(r["W"], dtype=float), r["in_ch"], r["kernel"])
        elif kind == "batchnorm":
            layer = BatchNorm(r["n"], r["momentum"], r["eps"])
            for key in ("gamma", "beta", "running_mean", "running_var"):
                setattr(layer, key, np.array(r[key], dtype=float))
        elif kind == "relu":
            layer = ReLU()
        elif kind == "maxpool":
            layer = MaxPool2()
        elif kind == "flatten":
            layer = Flatten()
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        if isinstance(layer, _Synaptic):
            layer.x_range = r.get("x_range", 1.0)
            layer.clip = r.get("clip")
        layers.append(layer)
    return Network(layers)


def network_to_json(net: Network) -> str:
    return json.dumps(network_to_record(net))


def network_from_json(text: str) -> Network:
    return network_from_record(json.loads(text))


# -- data ---------------------------------------------------------------------------


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    spec: dict


def make_blob_dataset(n_train=6000, n_val=2000, n_test=2000, seed=0, size=16, classes=10, blobs=3,
                      jitter=0.9, pixel_noise=0.15) -> Dataset:
    """Seeded 10-class images built from Gaussian blobs at class-specific sites.

    Every sample jitters its class's blob centres and amplitudes and adds
    pixel noise, so classes overlap slightly.  Pixels lie in [0, 1].
    """
    spec = {"generator": "gaussian_blobs", "n_train": n_train, "n_val": n_val, "n_test": n_test, "seed": seed,
            "size": size, "classes": classes, "blobs": blobs, "jitter": jitter, "pixel_noise": pixel_noise}
    proto_rng = make_rng(seed, "dataset.prototypes")
    centres = proto_rng.uniform(3.0, size - 4.0, (classes, blobs, 2))
    widths = proto_rng.uniform(1.2, 2.4, (classes, blobs))
    grid = np.arange(size, dtype=float)

    def draw(n, split):
        rng = make_rng(seed, "dataset." + split)
        y = rng.integers(0, classes, n)
        c = centres[y] + rng.normal(0.0, jitter, (n, blobs, 2))
        amp = rng.uniform(0.5, 1.0, (n, blobs))
        dy = grid[None, None, :] - c[:, :, 0:1]
        dx = grid[None, None, :] - c[:, :, 1:2]
        s2 = 2 * widths[y] ** 2
        img = np.einsum("nb,nbi,nbj->nij", amp, np.exp(-dy**2 / s2[..., None]), np.exp(-dx**2 / s2[..., None]))
        img += rng.normal(0.0, pixel_noise, img.shape)
        return np.clip(img, 0.0, 1.0)[..., None], y

    Xtr, ytr = draw(n_train, "train")
    Xva, yva = draw(n_val, "val")
    Xte, yte = draw(n_test, "test")
    return Dataset(Xtr, ytr, Xva, yva, Xte, yte, spec)


# -- training -------------------------------------------------------------------------


def softmax_xent(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
    d = p.copy()
    d[np.arange(n), y] -= 1.0
    return loss, d / n


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m, self.v, self.t = {}, {}, 0

    def step(self, triples):
        self.t += 1
        for key, p, g in triples:
            if self.wd:
                g = g + self.wd * p
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1**self.t)
            vh = v / (1 - self.b2**self.t)
            p -= self.lr * mh / (np.sqrt(vh) + self.eps)


class SGDMomentum:
    def __init__(self, lr=1e-2, momentum=0.9, weight_decay=0.0):
        self.lr, self.mu, self.wd = lr, momentum, weight_decay
        self.vel = {}

    def step(self, triples):
        for key, p, g in triples:
            if self.wd:
                g = g + self.wd * p
            v = self.vel.setdefault(key, np.zeros_like(p))
            v *= self.mu
            v += g
            p -= self.lr * v


def make_optimizer(name="adam", lr=1e-3, momentum=0.9, weight_decay=0.0):
    if name == "adam":
        return Adam(lr, weight_decay=weight_decay)
    if name == "sgd":
        return SGDMomentum(lr, momentum, weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


def train(net: Network, X, y, epochs=10, batch_size=64, optimizer="adam", lr=1e-3, momentum=0.9,
          weight_decay=0.0, seed=0, lr_schedule=None, perturb=None, weight_noise=0.0, trainable="all",
          X_val=None, y_val=None):
    """Minibatch training with cross-entropy loss.

    ``perturb(step)`` may return a hardware view used in the forward pass of
    that step (temperature sweeps, in-forward noise).  ``weight_noise`` adds
    a relative Gaussian disturbance to synaptic weights before each update.
    ``trainable="bn"`` updates batch-norm scale and shift only.  Returns the
    per-epoch history.
    """
    opt = optimizer if hasattr(optimizer, "step") else make_optimizer(optimizer, lr, momentum, weight_decay)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    n = len(X)
    if n == 0:
        raise ValueError("empty training set")
    history = []
    step = 0
    base_lr = opt.lr
    for epoch in range(epochs):
        if lr_schedule is not None:
            opt.lr = base_lr * lr_schedule(epoch)
        order = make_rng(seed, "train.shuffle", epoch).permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            view = perturb(step) if perturb is not None else None
            saved = None
            if weight_noise > 0:
                rng = make_rng(seed, "train.weight_noise", step)
                saved = [l.W.copy() for l in net.synaptic]
                for l in net.synaptic:
                    l.W *= 1.0 + rng.normal(0.0, weight_noise, l.W.shape)
            logits = net.forward(X[idx], train=True, view=view, sample_ids=idx)
            loss, d = softmax_xent(logits, y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at step {step}", history)
            net.backward(d)
            if saved is not None:
                for l, w in zip(net.synaptic, saved):
                    l.W[...] = w
            triples = []
            for k, (layer, name, arr) in enumerate(net.parameters()):
                if trainable == "bn" and not isinstance(layer, BatchNorm):
                    continue
                triples.append(((k, name), arr, layer.grads()[name]))
            opt.step(triples)
            total += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
            step += 1
        rec = {"epoch": epoch, "loss": float(total / n), "train_acc": correct / n}
        if X_val is not None:
            rec["val_acc"] = accuracy(net, X_val, y_val)
        history.append(rec)
    return history


def predict_logits(net: Network, X, view=None, batch_size=500):
    out = []
    for start in range(0, len(X), batch_size):
        ids = np.arange(start, min(start + batch_size, len(X)))
        out.append(net.forward(X[start:start + batch_size], view=view, sample_ids=ids))
    return np.concatenate(out)


def accuracy(net: Network, X, y, view=None) -> float:
    return float(np.mean(predict_logits(net, X, view).argmax(axis=1) == np.asarray(y)))


def _as_view(stack, net):
    if stack is None:
        return None
    return stack.realize(net) if hasattr(stack, "realize") else stack


def forward(net: Network, stack, batch, taps: bool = False):
    """Eval-mode forward under an imperfection stack; optionally returns preactivations."""
    view = _as_view(stack, net)
    t = {} if taps else None
    out = net.forward(batch, view=view, taps=t)
    return (out, t) if taps else out


def evaluate_accuracy_drop(net: Network, stack, X, y, seeds=None) -> dict:
    """Clean minus perturbed accuracy in percentage points.

    With ``seeds`` the stack is re-seeded for each repeat; otherwise it is
    evaluated once as given.
    """
    clean = 100.0 * accuracy(net, X, y)
    stacks = [stack] if seeds is None else [stack.with_seed(s) for s in seeds]
    drops = []
    for st in stacks:
        drops.append(clean - 100.0 * accuracy(net, X, y, _as_view(st, net)))
    drops = np.array(drops)
    return {"clean": clean, "mean": float(drops.mean()), "std": float(drops.std()), "drops": drops.tolist()}


def preactivation_percentiles(net: Network, stack, batches, neurons=None, percentiles=(10, 50, 90)) -> dict:
    """Per-neuron percentiles of synaptic-layer outputs over a stream of batches.

    ``neurons`` maps synaptic-layer index to a list of output channels
    (default: all channels of every layer).  Returns
    ``{layer: array(len(neurons), len(percentiles))}``.
    """
    view = _as_view(stack, net)
    collected: dict[int, list] = {}
    offset = 0
    for batch in batches:
        batch = np.asarray(batch, dtype=float)
        taps = {}
        net.forward(batch, view=view, sample_ids=np.arange(offset, offset + len(batch)), taps=taps)
        offset += len(batch)
        for i, v in taps.items():
            collected.setdefault(i, []).append(v.reshape(-1, v.shape[-1]))
    out = {}
    for i, chunks in collected.items():
        vals = np.concatenate(chunks)
        sel = range(vals.shape[1]) if neurons is None or i not in neurons else neurons[i]
        if neurons is not None and i not in neurons:
            continue
        for j in sel:
            if not 0 <= j < vals.shape[1]:
                raise IndexError(f"layer {i} has no neuron {j}")
        out[i] = np.percentile(vals[:, list(sel)], percentiles, axis=0).T
    return out


# -- gradient check ---------------------------------------------------------------------


def gradient_check(net: Network, X, y, probes=100, seed=0, h=1e-5):
    """Largest relative error between analytic and central-difference gradients.

    BN runs in training mode; running statistics are restored after each
    evaluation so probes see identical functions.
    """
    def loss_only():
        saved = [(b.running_mean.copy(), b.running_var.copy()) for b in net.batchnorms]
        loss, _ = softmax_xent(net.forward(X, train=True), y)
        for b, (m, v) in zip(net.batchnorms, saved):
            b.running_mean, b.running_var = m, v
        return loss

    saved = [(b.running_mean.copy(), b.running_var.copy()) for b in net.batchnorms]
    _, d = softmax_xent(net.forward(X, train=True), y)
    net.backward(d)
    for b, (m, v) in zip(net.batchnorms, saved):
        b.running_mean, b.running_var = m, v
    entries = []
    for layer, name, arr in net.parameters():
        g = layer.grads()[name]
        for flat in range(arr.size):
            entries.append((arr, g, flat))
    rng = make_rng(seed, "gradient_check")
    picks = rng.choice(len(entries), size=min(probes, len(entries)), replace=False)
    worst = 0.0
    for k in picks:
        arr, g, flat = entries[k]
        idx = np.unravel_index(flat, arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        lp = loss_only()
        arr[idx] = old - h
        lm = loss_only()
        arr[idx] = old
        num = (lp - lm) / (2 * h)
        ana = g[idx]
        err = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
        worst = max(worst, err)
    return worst


# -- sklearn front end --------------------------------------------------------------------


class MiniConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Desk-scale convolutional classifier with hardware-imperfection hooks.

    The trained engine is exposed as ``network_``; pass an imperfection stack
    to ``predict``/``score`` to evaluate it on simulated hardware.
    """

    def __init__(self, channels=(8, 16), hidden=64, epochs=20, batch_size=64, optimizer="adam", lr=1e-3,
                 momentum=0.9, weight_decay=0.0, seed=0):
        self.channels = channels
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed

    @staticmethod
    def _images(X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 3:
            X = X[..., None]
        if X.ndim != 4 or X.shape[1] != X.shape[2]:
            raise ValueError("expected square images shaped (n, h, w[, c])")
        return X

    def fit(self, X, y):
        X = self._images(X)
        y = np.asarray(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.network_ = build_mini_convnet(self.seed, tuple(self.channels), self.hidden, len(self.classes_),
                                           X.shape[1], X.shape[3])
        self.history_ = train(self.network_, X, y_idx, self.epochs, self.batch_size, self.optimizer, self.lr,
                              self.momentum, self.weight_decay, self.seed)
        self.network_.calibrate_ranges(X)
        return self

    def decision_function(self, X, stack=None):
        check_is_fitted(self)
        return predict_logits(self.network_, self._images(X), _as_view(stack, self.network_))

    def predict_proba(self, X, stack=None):
        z = self.decision_function(X, stack)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X, stack=None):
        z = self.decision_function(X, stack)
        return self.classes_[z.argmax(axis=1)]

    def score(self, X, y, sample_weight=None, stack=None):
        return float(np.mean(self.predict(X, stack) == np.asarray(y)))
