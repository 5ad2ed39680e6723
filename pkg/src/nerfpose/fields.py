"""Radiance fields: volume density sigma(x) >= 0 and color c(x, d) in [0,1]^3.

Two implementations share one protocol:

* ``AnalyticField`` -- smooth closed-form primitives (spheres, axis-aligned
  boxes) with exact input derivatives; serves as a ground-truth scene for
  pose-recovery experiments and as an oracle for the renderer.
* ``MLPField`` -- a small multilayer perceptron over positionally-encoded
  inputs with hand-written reverse-mode gradients for both its inputs
  (needed to move pose parameters) and its weights (needed for training).

Protocol (duck-typed; all arrays float, batched over leading axis N):

    query(x, d)             -> (sigma (N,), color (N,3))
    query_with_grads(x, d)  -> (sigma, color, dsigma_dx (N,3),
                                dcolor_dx (N,3,3), dcolor_dd (N,3,3))
    forward_cached(x, d)    -> (sigma, color, cache)
    vjp_inputs(cache, g_sigma, g_color)  -> (g_x (N,3), g_d (N,3))

Density never depends on the view direction; only the color head sees d.
Jacobian layout: dcolor_dx[n, m, k] = d c_m / d x_k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_DIR_NORM_TOL = 1e-3  # loose enough to admit finite-difference probes
_COLOR_EPS = 1e-9  # regularizer for the density-weighted color average
_TINT_AXIS = np.array([0.0, 0.0, 1.0])

MAGIC = b"NRF1"


def _as_batch(v) -> tuple[np.ndarray, bool]:
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return v[None, :], True
    return v, False


def _check_directions(d: np.ndarray) -> None:
    norms = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norms - 1.0) > _DIR_NORM_TOL):
        raise ValueError("view directions must be unit vectors")


def positional_encoding(v: np.ndarray, n_freqs: int) -> np.ndarray:
    """Sinusoidal features sin(2^j pi v), cos(2^j pi v) for j < n_freqs.

    Output ordering is frequency-major, then input component, with the
    sin/cos pair adjacent: (sin(2^0 pi v_0), cos(2^0 pi v_0),
    sin(2^0 pi v_1), ...).  n_freqs = 0 yields a zero-width encoding.
    """
    if n_freqs < 0:
        raise ValueError("frequency count must be nonnegative")
    v, single = _as_batch(v)
    n, k = v.shape
    if n_freqs == 0:
        out = np.zeros((n, 0), dtype=v.dtype)
        return out[0] if single else out
    freqs = (np.pi * 2.0 ** np.arange(n_freqs)).astype(v.dtype)
    ang = v[:, None, :] * freqs[None, :, None]  # (n, L, k)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(n, 2 * n_freqs * k)
    return enc[0] if single else enc


def _encode_with_raw(v: np.ndarray, n_freqs: int):
    """[v | positional_encoding(v)] plus the trig cache for the backward pass."""
    n, k = v.shape
    if n_freqs == 0:
        return v.copy(), None
    freqs = (np.pi * 2.0 ** np.arange(n_freqs)).astype(v.dtype)
    ang = v[:, None, :] * freqs[None, :, None]
    enc = np.empty((n, k + 2 * n_freqs * k), dtype=v.dtype)
    enc[:, :k] = v
    pairs = enc[:, k:].reshape(n, n_freqs, k, 2)
    s = np.sin(ang, out=pairs[..., 0])
    c = np.cos(ang, out=pairs[..., 1])
    return enc, (s, c, freqs, k)


def _encode_backward(g_enc: np.ndarray, trig) -> np.ndarray:
    """Pull a gradient on [v | encoding] back to a gradient on v."""
    if trig is None:
        return g_enc
    s, c, freqs, k = trig
    n = g_enc.shape[0]
    g_v = g_enc[:, :k].copy()
    g_pe = g_enc[:, k:].reshape(n, len(freqs), k, 2)
    # d sin(f v)/dv = f cos(f v); d cos(f v)/dv = -f sin(f v)
    g_v += np.einsum("nlk,l->nk", g_pe[..., 0] * c - g_pe[..., 1] * s, freqs)
    return g_v


def _smooth_profile(s: np.ndarray, width: float):
    """C^1 falloff: 1 deep inside (s <= -w), 0 outside (s >= w).

    Between, the classic smoothstep q^2 (3 - 2q) of q = (w - s) / 2w.
    Returns the profile and its derivative with respect to s.
    """
    q = np.clip((width - s) / (2.0 * width), 0.0, 1.0)
    val = q * q * (3.0 - 2.0 * q)
    dval_ds = np.where((q > 0.0) & (q < 1.0), 6.0 * q * (1.0 - q) * (-0.5 / width), 0.0)
    return val, dval_ds


@dataclass(frozen=True)
class Sphere:
    """Spherical density blob; radius should exceed the shell width."""

    center: np.ndarray
    radius: float
    width: float
    density: float
    albedo: np.ndarray
    view_tint: float = 0.0

    def signed_distance(self, x: np.ndarray):
        rel = x - np.asarray(self.center)
        dist = np.linalg.norm(rel, axis=-1)
        s = dist - self.radius
        safe = np.maximum(dist, 1e-12)[:, None]
        return s, rel / safe


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with a per-axis smooth falloff (C^1 everywhere
    provided every half extent exceeds the shell width)."""

    center: np.ndarray
    half_extents: np.ndarray
    width: float
    density: float
    albedo: np.ndarray
    view_tint: float = 0.0


class AnalyticField:
    """Sum of smooth primitives; color is the density-weighted albedo mix.

    sigma(x) = sum_i sigma_i(x); c(x, d) = sum_i sigma_i c_i(d) / (sigma + eps).
    A primitive's color may tilt with the view direction:
    c_i(d) = albedo_i (1 + tint (d . z)) / (1 + tint), staying in [0, 1].
    """

    def __init__(self, primitives, background_hint=None):
        self.primitives = list(primitives)
        self.background_hint = background_hint

    # -- per-primitive pieces -------------------------------------------------

    def _primitive_density(self, prim, x):
        """Density and its spatial gradient for one primitive."""
        if isinstance(prim, Sphere):
            s, grad_s = prim.signed_distance(x)
            val, dval = _smooth_profile(s, prim.width)
            return prim.density * val, prim.density * dval[:, None] * grad_s
        if isinstance(prim, Box):
            rel = x - np.asarray(prim.center)
            h = np.asarray(prim.half_extents)
            vals = np.empty_like(rel)
            dvals = np.empty_like(rel)
            for k in range(3):
                sk = np.abs(rel[:, k]) - h[k]
                vals[:, k], dv = _smooth_profile(sk, prim.width)
                dvals[:, k] = dv * np.sign(rel[:, k])
            prod = vals[:, 0] * vals[:, 1] * vals[:, 2]
            grad = np.empty_like(rel)
            for k in range(3):
                others = vals[:, (k + 1) % 3] * vals[:, (k + 2) % 3]
                grad[:, k] = others * dvals[:, k]
            return prim.density * prod, prim.density * grad
        raise TypeError(f"unknown primitive type {type(prim).__name__}")

    def _primitive_color(self, prim, d):
        """Color (N,3) and the scalar tint factor derivative w.r.t. (d . z)."""
        albedo = np.asarray(prim.albedo, dtype=float)
        tau = prim.view_tint
        if tau == 0.0:
            return np.broadcast_to(albedo, (d.shape[0], 3)), 0.0
        factor = (1.0 + tau * (d @ _TINT_AXIS)) / (1.0 + tau)
        return factor[:, None] * albedo, tau / (1.0 + tau)

    # -- protocol -------------------------------------------------------------

    def query(self, x, d):
        x, single = _as_batch(x)
        d, _ = _as_batch(d)
        _check_directions(d)
        sigma, color, _ = self._evaluate(x, d)
        if single:
            return sigma[0], color[0]
        return sigma, color

    def _evaluate(self, x, d):
        n = x.shape[0]
        sigma = np.zeros(n)
        num = np.zeros((n, 3))
        parts = []
        for prim in self.primitives:
            sig_i, dsig_i = self._primitive_density(prim, x)
            col_i, dfac_i = self._primitive_color(prim, d)
            sigma += sig_i
            num += sig_i[:, None] * col_i
            parts.append((prim, sig_i, dsig_i, col_i, dfac_i))
        color = num / (sigma + _COLOR_EPS)[:, None]
        return sigma, color, parts

    def forward_cached(self, x, d):
        x, _ = _as_batch(x)
        d, _ = _as_batch(d)
        _check_directions(d)
        sigma, color, parts = self._evaluate(x, d)
        return sigma, color, (x, d, sigma, color, parts)

    def vjp_inputs(self, cache, g_sigma, g_color):
        x, d, sigma, color, parts = cache
        denom = (sigma + _COLOR_EPS)[:, None]
        g_x = np.zeros_like(x)
        g_d = np.zeros_like(d)
        gc_dot_c = np.sum(g_color * color, axis=1)
        for prim, sig_i, dsig_i, col_i, dfac_i in parts:
            gc_dot_ci = np.sum(g_color * col_i, axis=1)
            # density path: direct + through the color quotient
            coeff = g_sigma + (gc_dot_ci - gc_dot_c) / denom[:, 0]
            g_x += coeff[:, None] * dsig_i
            if dfac_i != 0.0:
                albedo = np.asarray(prim.albedo, dtype=float)
                g_d += (
                    (sig_i / denom[:, 0] * dfac_i * (g_color @ albedo))[:, None]
                    * _TINT_AXIS
                )
        return g_x, g_d

    def query_with_grads(self, x, d):
        x, single = _as_batch(x)
        d, _ = _as_batch(d)
        _check_directions(d)
        sigma, color, parts = self._evaluate(x, d)
        n = x.shape[0]
        denom = (sigma + _COLOR_EPS)[:, None]
        dsdx = np.zeros((n, 3))
        dcdx = np.zeros((n, 3, 3))
        dcdd = np.zeros((n, 3, 3))
        for prim, sig_i, dsig_i, col_i, dfac_i in parts:
            dsdx += dsig_i
            dcdx += (col_i - color)[:, :, None] * dsig_i[:, None, :] / denom[:, :, None]
            if dfac_i != 0.0:
                albedo = np.asarray(prim.albedo, dtype=float)
                dcdd += (
                    (sig_i / denom[:, 0] * dfac_i)[:, None, None]
                    * albedo[None, :, None]
                    * _TINT_AXIS[None, None, :]
                )
        if single:
            return sigma[0], color[0], dsdx[0], dcdx[0], dcdd[0]
        return sigma, color, dsdx, dcdx, dcdd

    @property
    def has_params(self) -> bool:
        return False


def _softplus(z):
    # stable log(1 + e^z); these SIMD ufuncs beat fused scalar kernels here
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    # 0.5 (1 + tanh(z/2)) == 1/(1 + e^-z), saturates without overflow
    return 0.5 + 0.5 * np.tanh(0.5 * z)


# Serialization order of the linear layers (weights then bias each).
_LAYER_NAMES = ("t0", "t1", "t2", "t3", "sig", "c0", "c1")


class MLPField:
    """Trainable radiance field: trunk MLP on encoded positions, a softplus
    density head, and a sigmoid color head that sees the encoded direction.

    All activations on the output path are smooth, so input Jacobians are
    well defined everywhere and finite-difference checks are meaningful.
    Parameters live in ``params`` as ``{name: {"w": ..., "b": ...}}``.
    """

    def __init__(self, params, n_freqs_pos=6, n_freqs_dir=2, dtype=np.float32):
        self.params = params
        self.n_freqs_pos = n_freqs_pos
        self.n_freqs_dir = n_freqs_dir
        self.dtype = np.dtype(dtype)

    # -- construction ---------------------------------------------------------

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        hidden: int = 64,
        color_hidden: int = 32,
        n_freqs_pos: int = 6,
        n_freqs_dir: int = 2,
        dtype=np.float32,
    ) -> "MLPField":
        in_pos = 3 + 6 * n_freqs_pos
        in_dir = 3 + 6 * n_freqs_dir
        dims = {
            "t0": (hidden, in_pos),
            "t1": (hidden, hidden),
            "t2": (hidden, hidden),
            "t3": (hidden, hidden),
            "sig": (1, hidden),
            "c0": (color_hidden, hidden + in_dir),
            "c1": (3, color_hidden),
        }
        params = {}
        for name, (out_dim, in_dim) in dims.items():
            scale = np.sqrt(2.0 / in_dim) if name.startswith("t") or name == "c0" else np.sqrt(1.0 / in_dim)
            params[name] = {
                "w": rng.normal(0.0, scale, size=(out_dim, in_dim)).astype(dtype),
                "b": np.zeros(out_dim, dtype=dtype),
            }
        return cls(params, n_freqs_pos, n_freqs_dir, dtype)

    def copy(self) -> "MLPField":
        params = {k: {"w": v["w"].copy(), "b": v["b"].copy()} for k, v in self.params.items()}
        return MLPField(params, self.n_freqs_pos, self.n_freqs_dir, self.dtype)

    @property
    def has_params(self) -> bool:
        return True

    def param_items(self):
        """Deterministic iteration over (key, array) leaves."""
        for name in _LAYER_NAMES:
            yield (name, "w"), self.params[name]["w"]
            yield (name, "b"), self.params[name]["b"]

    # -- forward / backward ---------------------------------------------------

    def _forward(self, x, d):
        p = self.params
        ex, trig_x = _encode_with_raw(x, self.n_freqs_pos)
        ed, trig_d = _encode_with_raw(d, self.n_freqs_dir)
        zs, hs = [], []
        h = ex
        for name in ("t0", "t1", "t2", "t3"):
            z = h @ p[name]["w"].T + p[name]["b"]
            h = _softplus(z)
            zs.append(z)
            hs.append(h)
        z_sig = hs[-1] @ p["sig"]["w"].T + p["sig"]["b"]
        sigma = _softplus(z_sig)[:, 0]
        hc_in = np.concatenate([hs[-1], ed], axis=1)
        zc0 = hc_in @ p["c0"]["w"].T + p["c0"]["b"]
        hc0 = _softplus(zc0)
        zc1 = hc0 @ p["c1"]["w"].T + p["c1"]["b"]
        color = _sigmoid(zc1)
        cache = (ex, ed, trig_x, trig_d, zs, hs, z_sig, hc_in, zc0, hc0, zc1, color)
        return sigma, color, cache

    def query(self, x, d):
        x, single = _as_batch(x)
        d, _ = _as_batch(d)
        _check_directions(d)
        sigma, color, _ = self._forward(x.astype(self.dtype), d.astype(self.dtype))
        if single:
            return float(sigma[0]), color[0].astype(float)
        return sigma, color

    def forward_cached(self, x, d):
        x, _ = _as_batch(x)
        d, _ = _as_batch(d)
        _check_directions(d)
        return self._forward(x.astype(self.dtype), d.astype(self.dtype))

    def _backward(self, cache, g_sigma, g_color, need_inputs=True, need_params=False):
        p = self.params
        (ex, ed, trig_x, trig_d, zs, hs, z_sig, hc_in, zc0, hc0, zc1, color) = cache
        g_sigma = np.asarray(g_sigma, dtype=self.dtype)
        g_color = np.asarray(g_color, dtype=self.dtype)
        grads = {} if need_params else None

        dzc1 = g_color * color * (1.0 - color)
        if need_params:
            grads["c1"] = {"w": dzc1.T @ hc0, "b": dzc1.sum(axis=0)}
        dhc0 = dzc1 @ p["c1"]["w"]
        dzc0 = dhc0 * _sigmoid(zc0)
        if need_params:
            grads["c0"] = {"w": dzc0.T @ hc_in, "b": dzc0.sum(axis=0)}
        dhc_in = dzc0 @ p["c0"]["w"]
        hidden = hs[-1].shape[1]
        dh = dhc_in[:, :hidden].copy()
        g_ed = dhc_in[:, hidden:]

        dz_sig = (g_sigma * _sigmoid(z_sig[:, 0]))[:, None]
        if need_params:
            grads["sig"] = {"w": dz_sig.T @ hs[-1], "b": dz_sig.sum(axis=0)}
        dh += dz_sig @ p["sig"]["w"]

        layer_inputs = [ex, hs[0], hs[1], hs[2]]
        for i in (3, 2, 1, 0):
            name = f"t{i}"
            dz = dh * _sigmoid(zs[i])
            if need_params:
                grads[name] = {"w": dz.T @ layer_inputs[i], "b": dz.sum(axis=0)}
            dh = dz @ p[name]["w"]

        if not need_inputs:
            return None, None, grads
        g_x = _encode_backward(dh, trig_x)
        g_d = _encode_backward(g_ed, trig_d)
        return g_x, g_d, grads

    def vjp_inputs(self, cache, g_sigma, g_color):
        g_x, g_d, _ = self._backward(cache, g_sigma, g_color, need_inputs=True)
        return g_x, g_d

    def vjp_params(self, cache, g_sigma, g_color):
        _, _, grads = self._backward(
            cache, g_sigma, g_color, need_inputs=False, need_params=True
        )
        return grads

    def query_with_grads(self, x, d):
        x, single = _as_batch(x)
        d, _ = _as_batch(d)
        _check_directions(d)
        xb = x.astype(self.dtype)
        db = d.astype(self.dtype)
        sigma, color, cache = self._forward(xb, db)
        n = xb.shape[0]
        ones = np.ones(n, dtype=self.dtype)
        zeros3 = np.zeros((n, 3), dtype=self.dtype)
        dsdx, _, _ = self._backward(cache, ones, zeros3)
        dcdx = np.empty((n, 3, 3))
        dcdd = np.empty((n, 3, 3))
        for m in range(3):
            basis = np.zeros((n, 3), dtype=self.dtype)
            basis[:, m] = 1.0
            gx, gd, _ = self._backward(cache, np.zeros(n, dtype=self.dtype), basis)
            dcdx[:, m, :] = gx
            dcdd[:, m, :] = gd
        if single:
            return float(sigma[0]), color[0].astype(float), dsdx[0], dcdx[0], dcdd[0]
        return sigma, color, dsdx, dcdx, dcdd

    # -- serialization --------------------------------------------------------

    def save(self, path) -> None:
        """Binary format: magic 'NRF1', little-endian u32 header
        (n_freqs_pos, n_freqs_dir, layer count, then out/in dims per layer),
        then each layer's weights row-major and bias as little-endian f32."""
        header = [self.n_freqs_pos, self.n_freqs_dir, len(_LAYER_NAMES)]
        for name in _LAYER_NAMES:
            w = self.params[name]["w"]
            header.extend(w.shape)
        blob = bytearray(MAGIC)
        blob += np.asarray(header, dtype="<u4").tobytes()
        for name in _LAYER_NAMES:
            blob += np.ascontiguousarray(self.params[name]["w"], dtype="<f4").tobytes()
            blob += np.ascontiguousarray(self.params[name]["b"], dtype="<f4").tobytes()
        with open(path, "wb") as fh:
            fh.write(bytes(blob))

    @classmethod
    def load(cls, path, dtype=np.float32) -> "MLPField":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != MAGIC:
            raise ValueError(f"{path}: not a radiance-field file (bad magic)")
        head = np.frombuffer(blob, dtype="<u4", offset=4, count=3)
        n_freqs_pos, n_freqs_dir, n_layers = (int(v) for v in head)
        if n_layers != len(_LAYER_NAMES):
            raise ValueError(f"{path}: expected {len(_LAYER_NAMES)} layers, got {n_layers}")
        dims = np.frombuffer(blob, dtype="<u4", offset=16, count=2 * n_layers).reshape(-1, 2)
        offset = 16 + 8 * n_layers
        params = {}
        for name, (out_dim, in_dim) in zip(_LAYER_NAMES, dims):
            out_dim, in_dim = int(out_dim), int(in_dim)
            w = np.frombuffer(blob, dtype="<f4", offset=offset, count=out_dim * in_dim)
            offset += 4 * out_dim * in_dim
            b = np.frombuffer(blob, dtype="<f4", offset=offset, count=out_dim)
            offset += 4 * out_dim
            params[name] = {
                "w": w.reshape(out_dim, in_dim).astype(dtype),
                "b": b.astype(dtype),
            }
        if offset != len(blob):
            raise ValueError(f"{path}: trailing bytes in field file")
        return cls(params, n_freqs_pos, n_freqs_dir, dtype)
