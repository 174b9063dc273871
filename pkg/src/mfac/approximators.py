"""Function approximators with hand-written backprop.

Every container keeps its parameters in one flat float64 vector; the layer
matrices are views into it. Gradients come back in the same flat layout
(layer-major, row-major weights, bias after the weights of each layer), so
an SGD step is a single vector update.
"""

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    """A parameter update produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x = x.reshape(1, -1) if single else x
    if x.shape[-1] != dim:
        raise ValueError(f"expected input dimension {dim}, got {x.shape[-1]}")
    return x, single


class Mlp:
    """Dense network, tanh on hidden layers, identity on the output layer.

    ``sizes`` lists every layer width including input and output, e.g.
    ``(1, 128, 1)`` for the default critic.
    """

    def __init__(self, sizes, activation="tanh", rng=None, params=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes!r}")
        self.activation = activation
        if activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.n_params = sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))
        if params is None:
            params = np.empty(self.n_params)
            self._bind(params)
            rng = np.random.default_rng() if rng is None else rng
            for W, b in self.layers:
                bound = 1.0 / math.sqrt(W.shape[1])
                W[...] = rng.uniform(-bound, bound, W.shape)
                b[...] = rng.uniform(-bound, bound, b.shape)
        else:
            params = np.array(params, dtype=float)
            if params.shape != (self.n_params,):
                raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
            self._bind(params)

    def _bind(self, flat):
        self.params = flat
        self.layers = []
        pos = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = flat[pos:pos + n_in * n_out].reshape(n_out, n_in)
            pos += n_in * n_out
            b = flat[pos:pos + n_out]
            pos += n_out
            self.layers.append((W, b))

    @property
    def n_inputs(self):
        return self.sizes[0]

    @property
    def n_outputs(self):
        return self.sizes[-1]

    def copy(self):
        return Mlp(self.sizes, self.activation, params=self.params.copy())

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else z

    def forward(self, x):
        """Outputs for a batch ``(n, d_in)``; returns ``(out, cache)``."""
        h = x
        cache = [h]
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            z = h @ W.T + b
            h = z if k == last else self._act(z)
            cache.append(h)
        return h, cache

    def backward(self, cache, dout):
        """Flat gradient of ``sum(dout * out)`` plus the input gradient."""
        grad = np.empty(self.n_params)
        pos = self.n_params
        delta = dout
        last = len(self.layers) - 1
        for k in range(last, -1, -1):
            W, b = self.layers[k]
            h_in = cache[k]
            n_w = W.size
            pos -= W.shape[0]
            grad[pos:pos + W.shape[0]] = delta.sum(axis=0)
            pos -= n_w
            grad[pos:pos + n_w] = (delta.T @ h_in).ravel()
            delta = delta @ W
            if k > 0 and self.activation == "tanh":
                delta = delta * (1.0 - h_in * h_in)
        return grad, delta

    def __call__(self, x):
        xb, single = _as_batch(x, self.n_inputs)
        out, _ = self.forward(xb)
        return out[0] if single else out


class MlpCritic(Mlp):
    """Scalar-output MLP value function."""

    def __init__(self, n_inputs=1, hidden=(128,), rng=None, params=None):
        super().__init__((n_inputs, *hidden, 1), rng=rng, params=params)

    def copy(self):
        return MlpCritic(self.sizes[0], self.sizes[1:-1], params=self.params.copy())

    def value(self, x):
        xb, single = _as_batch(x, self.n_inputs)
        v = self.forward(xb)[0][:, 0]
        return float(v[0]) if single else v

    def gradient(self, x):
        """Gradient of V at a single state, or the summed gradient over a batch."""
        xb, _ = _as_batch(x, self.n_inputs)
        _, cache = self.forward(xb)
        return self.backward(cache, np.ones((xb.shape[0], 1)))[0]

    def weighted_gradient(self, x, weights):
        """``sum_n weights[n] * grad V(x_n)``."""
        xb, _ = _as_batch(x, self.n_inputs)
        _, cache = self.forward(xb)
        w = np.asarray(weights, dtype=float).reshape(-1, 1)
        return self.backward(cache, w)[0]


def polynomial_features(degree):
    def phi(x):
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 0] ** p for p in range(degree + 1)], axis=-1)
    return phi


def quadratic_features_2d(x):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([np.ones_like(x1), x1, x2, x1 * x1, x1 * x2, x2 * x2], axis=-1)


BASES = {
    "poly1": (1, polynomial_features(1)),
    "poly2": (1, polynomial_features(2)),
    "poly3": (1, polynomial_features(3)),
    "quad2d": (2, quadratic_features_2d),
}


class LinearCritic:
    """``V(x) = phi(x) . theta`` over a fixed named basis."""

    def __init__(self, basis="poly2", params=None):
        if basis not in BASES:
            raise ValueError(f"unknown basis {basis!r}; choose from {sorted(BASES)}")
        self.basis = basis
        self.n_inputs, self._phi = BASES[basis]
        n = self._phi(np.zeros((1, self.n_inputs))).shape[-1]
        self.n_params = n
        self.params = np.zeros(n) if params is None else np.array(params, dtype=float)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} coefficients, got {self.params.shape}")

    def copy(self):
        return LinearCritic(self.basis, self.params.copy())

    def features(self, x):
        xb, _ = _as_batch(x, self.n_inputs)
        return self._phi(xb)

    def value(self, x):
        xb, single = _as_batch(x, self.n_inputs)
        v = self._phi(xb) @ self.params
        return float(v[0]) if single else v

    def gradient(self, x):
        return self.features(x).sum(axis=0)

    def weighted_gradient(self, x, weights):
        return np.asarray(weights, dtype=float) @ self.features(x)


class GaussianPolicy:
    """Diagonal Gaussian policy: shared tanh trunk, separate mean and std heads.

    The std head output ``s`` maps to ``exp(s) + std_floor`` so every emitted
    standard deviation is strictly above the floor.
    """

    def __init__(self, n_inputs=1, n_actions=1, trunk=(64,), head=(64,),
                 std_floor=1e-5, rng=None, params=None):
        if std_floor <= 0:
            raise ValueError("std_floor must be positive")
        self.std_floor = float(std_floor)
        self.n_inputs = int(n_inputs)
        self.n_actions = int(n_actions)
        self.trunk_sizes = tuple(trunk)
        self.head_sizes = tuple(head)
        rng = np.random.default_rng() if rng is None else rng
        width = trunk[-1] if trunk else n_inputs
        self.trunk = Mlp((n_inputs, *trunk), rng=rng) if trunk else None
        self.mean_head = Mlp((width, *head, n_actions), rng=rng)
        self.std_head = Mlp((width, *head, n_actions), rng=rng)
        parts = [p for p in (self.trunk, self.mean_head, self.std_head) if p is not None]
        self.n_params = sum(p.n_params for p in parts)
        flat = np.concatenate([p.params for p in parts])
        if params is not None:
            params = np.asarray(params, dtype=float)
            if params.shape != flat.shape:
                raise ValueError(f"expected {flat.shape[0]} parameters, got {params.shape}")
            flat = params.copy()
        self.params = flat
        pos = 0
        for p in parts:
            p._bind(flat[pos:pos + p.n_params])
            pos += p.n_params

    def copy(self):
        return GaussianPolicy(self.n_inputs, self.n_actions, self.trunk_sizes,
                              self.head_sizes, self.std_floor, params=self.params.copy())

    def _trunk_forward(self, x):
        # Last trunk layer is tanh too: the trunk is a hidden block, not an output.
        if self.trunk is None:
            return x, None
        h = x
        cache = [h]
        for W, b in self.trunk.layers:
            h = np.tanh(h @ W.T + b)
            cache.append(h)
        return h, cache

    def _trunk_backward(self, cache, dh):
        grad = np.empty(self.trunk.n_params)
        pos = self.trunk.n_params
        delta = dh
        for k in range(len(self.trunk.layers) - 1, -1, -1):
            W, _ = self.trunk.layers[k]
            h_out = cache[k + 1]
            delta = delta * (1.0 - h_out * h_out)
            pos -= W.shape[0]
            grad[pos:pos + W.shape[0]] = delta.sum(axis=0)
            pos -= W.size
            grad[pos:pos + W.size] = (delta.T @ cache[k]).ravel()
            delta = delta @ W
        return grad

    def _forward(self, xb):
        h, tcache = self._trunk_forward(xb)
        mean, mcache = self.mean_head.forward(h)
        s, scache = self.std_head.forward(h)
        es = np.exp(s)
        return mean, es + self.std_floor, es, (tcache, mcache, scache)

    def mean_std(self, x):
        xb, single = _as_batch(x, self.n_inputs)
        mean, std, _, _ = self._forward(xb)
        return (mean[0], std[0]) if single else (mean, std)

    def mean_action(self, x):
        return self.mean_std(x)[0]

    def sample(self, x, rng, noise=None):
        """``mean(x) + std(x) * z``; pass ``noise`` to fix ``z``."""
        xb, single = _as_batch(x, self.n_inputs)
        mean, std, _, _ = self._forward(xb)
        z = rng.standard_normal(mean.shape) if noise is None else np.broadcast_to(noise, mean.shape)
        a = mean + std * z
        return a[0] if single else a

    def log_prob(self, x, a):
        xb, single = _as_batch(x, self.n_inputs)
        ab = np.asarray(a, dtype=float).reshape(xb.shape[0], self.n_actions)
        mean, std, _, _ = self._forward(xb)
        u = (ab - mean) / std
        lp = -0.5 * (u * u).sum(axis=1) - np.log(std).sum(axis=1) - 0.5 * self.n_actions * LOG_2PI
        return float(lp[0]) if single else lp

    def log_prob_grad(self, x, a, weights=None):
        """Gradient of ``sum_n w_n log pi(a_n | x_n)``; ``w`` defaults to ones."""
        xb, _ = _as_batch(x, self.n_inputs)
        ab = np.asarray(a, dtype=float).reshape(xb.shape[0], self.n_actions)
        w = np.ones(xb.shape[0]) if weights is None else np.asarray(weights, dtype=float)
        w = w.reshape(-1, 1)
        mean, std, es, (tcache, mcache, scache) = self._forward(xb)
        diff = ab - mean
        d_mean = w * diff / std ** 2
        d_std = w * (diff ** 2 / std ** 3 - 1.0 / std)
        g_mean, dh_m = self.mean_head.backward(mcache, d_mean)
        g_std, dh_s = self.std_head.backward(scache, d_std * es)
        if self.trunk is None:
            return np.concatenate([g_mean, g_std])
        g_trunk = self._trunk_backward(tcache, dh_m + dh_s)
        return np.concatenate([g_trunk, g_mean, g_std])


def sgd_step(params, grad, rate, step=None):
    """In-place ``params -= rate * grad``; returns ``params``.

    ``params`` may be an approximator (its flat vector is updated) or an array.
    """
    vec = params.params if hasattr(params, "params") else params
    grad = np.asarray(grad, dtype=float)
    if grad.shape != vec.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {vec.shape}")
    if rate < 0:
        raise ValueError("rate must be non-negative")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient", step)
    if rate:
        vec -= rate * grad
    return params


# -- checkpoint format ---------------------------------------------------------
#
# Text file, first line an architecture descriptor, then one real per line in
# the canonical flat order (shortest round-trip repr, so reload is exact):
#
#     mfac-params 1 mlp sizes=1,128,1 activation=tanh
#     mfac-params 1 gaussian inputs=1 actions=1 trunk=64 head=64 std_floor=1e-05
#     mfac-params 1 linear basis=poly2
#
# A critic bank writes ``kind=bank n=<critics>`` with the member sizes and its
# stacked parameters row by row. Lines starting with ``#`` after the
# descriptor are comments (the runner stores its config echo there).

MAGIC = "mfac-params 1"


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v)


def describe(obj):
    """Architecture descriptor line for ``obj``."""
    if isinstance(obj, GaussianPolicy):
        return (f"{MAGIC} gaussian inputs={obj.n_inputs} actions={obj.n_actions} "
                f"trunk={','.join(map(str, obj.trunk_sizes))} head={','.join(map(str, obj.head_sizes))} "
                f"std_floor={obj.std_floor!r}")
    if isinstance(obj, Mlp):
        return f"{MAGIC} mlp sizes={','.join(map(str, obj.sizes))} activation={obj.activation}"
    if isinstance(obj, LinearCritic):
        return f"{MAGIC} linear basis={obj.basis}"
    if hasattr(obj, "n_critics"):
        return f"{MAGIC} bank n={obj.n_critics} sizes={','.join(map(str, obj.sizes))}"
    raise TypeError(f"cannot describe {type(obj).__name__}")


def dumps_params(obj, comment=None):
    lines = [describe(obj)]
    if comment:
        lines += [f"# {line}" for line in str(comment).splitlines()]
    lines += [repr(float(v)) for v in np.ravel(obj.params)]
    return "\n".join(lines) + "\n"


def save_params(obj, path, comment=None):
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(dumps_params(obj, comment))
    os.replace(tmp, path)


def loads_params(text):
    """Rebuild the container written by :func:`dumps_params`."""
    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith(MAGIC):
        raise ValueError("not an mfac parameter file")
    head = lines[0][len(MAGIC):].split()
    kind, fields = head[0], dict(f.split("=", 1) for f in head[1:])
    values = np.array([float(v) for v in lines[1:] if not v.startswith("#")])
    if kind == "mlp":
        sizes = _ints(fields["sizes"])
        cls = MlpCritic if sizes[-1] == 1 and fields.get("activation", "tanh") == "tanh" else Mlp
        if cls is MlpCritic:
            return MlpCritic(sizes[0], sizes[1:-1], params=values)
        return Mlp(sizes, fields.get("activation", "tanh"), params=values)
    if kind == "gaussian":
        return GaussianPolicy(int(fields["inputs"]), int(fields["actions"]), _ints(fields["trunk"]),
                              _ints(fields["head"]), float(fields["std_floor"]), params=values)
    if kind == "linear":
        return LinearCritic(fields["basis"], params=values)
    if kind == "bank":
        from .agents import CriticBank
        sizes = _ints(fields["sizes"])
        n = int(fields["n"])
        return CriticBank(n, sizes[0], sizes[1:-1], params=values.reshape(n, -1))
    raise ValueError(f"unknown parameter kind {kind!r}")


def load_params(path):
    with open(path) as fh:
        return loads_params(fh.read())
