"""Dual-branch beamforming network and its reverse-mode gradient engine.

The network maps stacked real/imag channel features to a complex beamforming
matrix, which is rescaled onto the transmit-power sphere. The training loss is
the negated scalarized utility (comm rate + radar rate), and the backward pass
is written by hand for exactly this pipeline: four dense layers, the power
projection, and the two quadratic-form rate heads. Complex quantities are
differentiated as independent real/imag pairs throughout.

Other base stations' beamformers enter the objective only through
interference terms and are treated as constants (no cross-BS gradient flow).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from isacfl.channel import RngStream
from isacfl.metrics import ChannelSample, Scenario, mrc_combiner

_LN2 = float(np.log(2.0))

LAYER_NAMES = ("comm", "sens", "fusion", "out")

PARAMS_MAGIC = "isacfl-params"
ADAM_MAGIC = "isacfl-adam"
FORMAT_VERSION = 1

POWER_TOL = 1e-9

_power_checks = 0


class PowerConstraintError(ArithmeticError):
    """A produced beamformer exceeded the transmit power budget."""


def power_checks_performed() -> int:
    """How many beamformer batches the inline power guard has validated."""
    return _power_checks


@dataclass(frozen=True)
class NetConfig:
    """Shape of the dual-branch beamforming network."""

    n_t: int
    k_max: int
    hidden: int = 256

    def __post_init__(self):
        if self.n_t < 1 or self.k_max < 1 or self.hidden < 1:
            raise ValueError("all network dimensions must be >= 1")

    @property
    def comm_in_dim(self) -> int:
        return self.n_t * self.k_max * 2

    @property
    def sens_in_dim(self) -> int:
        return self.n_t * 2

    @property
    def out_dim(self) -> int:
        return self.n_t * self.k_max * 2


def layer_dims(cfg: NetConfig) -> dict[str, tuple[int, int]]:
    """(fan_in, fan_out) of each dense layer, in flat-packing order."""
    return {
        "comm": (cfg.comm_in_dim, cfg.hidden),
        "sens": (cfg.sens_in_dim, cfg.hidden),
        "fusion": (2 * cfg.hidden, cfg.hidden),
        "out": (cfg.hidden, cfg.out_dim),
    }


def param_count(cfg: NetConfig) -> int:
    return sum(fi * fo + fo for fi, fo in layer_dims(cfg).values())


@dataclass
class ModelParams:
    """Flat float64 parameter vector plus the layout it packs."""

    data: np.ndarray
    cfg: NetConfig

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (param_count(self.cfg),):
            raise ValueError(f"flat vector length {self.data.shape} does not match layout {param_count(self.cfg)}")

    def copy(self) -> "ModelParams":
        return ModelParams(self.data.copy(), self.cfg)


def unpack(params: ModelParams) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Views (no copies) of each layer's weight matrix and bias vector."""
    out = {}
    offset = 0
    for name, (fi, fo) in layer_dims(params.cfg).items():
        w = params.data[offset : offset + fi * fo].reshape(fi, fo)
        offset += fi * fo
        b = params.data[offset : offset + fo]
        offset += fo
        out[name] = (w, b)
    return out


def init_params(cfg: NetConfig, rng: RngStream) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic per stream."""
    gen = rng.generator()
    flat = np.zeros(param_count(cfg))
    offset = 0
    for _, (fi, fo) in layer_dims(cfg).items():
        bound = np.sqrt(6.0 / (fi + fo))
        flat[offset : offset + fi * fo] = gen.uniform(-bound, bound, size=fi * fo)
        offset += fi * fo + fo  # biases stay zero
    return ModelParams(flat, cfg)


@dataclass
class AdamState:
    """Adam moments and step counter for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n_params: int, lr: float = 1e-4) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), lr=lr)

    def copy(self) -> "AdamState":
        return replace(self, m=self.m.copy(), v=self.v.copy())


def adam_step(params: ModelParams, grad: np.ndarray, state: AdamState) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; purely functional."""
    if grad.shape != params.data.shape:
        raise ValueError("gradient length does not match parameter vector")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_data = params.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ModelParams(new_data, params.cfg), replace(state, m=m, v=v, step=t)


def project_power(w_raw: np.ndarray, p_t: float) -> np.ndarray:
    """Rescale a beamformer onto the power sphere ||W||_F^2 = p_t.

    The all-zero matrix is returned unchanged (nothing to scale).
    """
    norm = np.linalg.norm(w_raw)
    if norm == 0.0:
        return w_raw.copy()
    return w_raw * (np.sqrt(p_t) / norm)


def sens_channel(theta: float | np.ndarray, beta: complex | np.ndarray, scn: Scenario) -> np.ndarray:
    """Effective post-combining sensing channel beta * sqrt(n_r) * b(theta).

    With the unit-norm matched combiner at the receiver, the target echo seen
    by the transmit side collapses to this n_t-vector.
    """
    theta_arr = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    beta_arr = np.atleast_1d(np.asarray(beta, dtype=np.complex128))
    idx = np.arange(scn.n_t)
    phase = 2.0 * np.pi * scn.element_spacing * np.outer(np.sin(theta_arr), idx)
    b = np.exp(1j * phase)  # (B, n_t)
    u = np.sqrt(scn.n_r) * beta_arr[:, None] * b
    return u[0] if np.isscalar(theta) or np.ndim(theta) == 0 else u


# ---------------------------------------------------------------------------
# Feature construction


def comm_features(comm_direct: np.ndarray, cfg: NetConfig) -> np.ndarray:
    """Flatten (B, k_m, n_t) direct channels into (B, n_t * k_max * 2) features.

    The user axis is zero-padded up to k_max; layout is (n_t, k_max, re/im),
    row-major.
    """
    bsz, k_m, n_t = comm_direct.shape
    if n_t != cfg.n_t or k_m > cfg.k_max:
        raise ValueError("channel dimensions do not match the network config")
    tensor = np.zeros((bsz, cfg.n_t, cfg.k_max, 2))
    h = np.transpose(comm_direct, (0, 2, 1))  # (B, n_t, k_m)
    tensor[:, :, :k_m, 0] = h.real
    tensor[:, :, :k_m, 1] = h.imag
    return tensor.reshape(bsz, cfg.comm_in_dim)


def sens_features(u: np.ndarray, cfg: NetConfig) -> np.ndarray:
    """Flatten (B, n_t) sensing channels into (B, n_t * 2) features."""
    if u.shape[1] != cfg.n_t:
        raise ValueError("sensing channel dimension does not match the network config")
    tensor = np.stack([u.real, u.imag], axis=-1)
    return tensor.reshape(u.shape[0], cfg.sens_in_dim)


# ---------------------------------------------------------------------------
# Forward / backward core


def _mlp_forward(p: dict, xc: np.ndarray, xs: np.ndarray):
    zc = xc @ p["comm"][0] + p["comm"][1]
    ac = np.maximum(zc, 0.0)
    zs = xs @ p["sens"][0] + p["sens"][1]
    asn = np.maximum(zs, 0.0)
    af = np.concatenate([ac, asn], axis=1)
    zf = af @ p["fusion"][0] + p["fusion"][1]
    f = np.maximum(zf, 0.0)
    y = f @ p["out"][0] + p["out"][1]
    return y, (xc, xs, zc, ac, zs, asn, af, zf, f)


def _mlp_backward(p: dict, cache, g_y: np.ndarray, cfg: NetConfig) -> np.ndarray:
    xc, xs, zc, ac, zs, asn, af, zf, f = cache
    hidden = cfg.hidden
    g_out_w = f.T @ g_y
    g_out_b = g_y.sum(axis=0)
    g_f = g_y @ p["out"][0].T
    g_zf = g_f * (zf > 0.0)
    g_fus_w = af.T @ g_zf
    g_fus_b = g_zf.sum(axis=0)
    g_af = g_zf @ p["fusion"][0].T
    g_zc = g_af[:, :hidden] * (zc > 0.0)
    g_zs = g_af[:, hidden:] * (zs > 0.0)
    g_comm_w = xc.T @ g_zc
    g_comm_b = g_zc.sum(axis=0)
    g_sens_w = xs.T @ g_zs
    g_sens_b = g_zs.sum(axis=0)
    return np.concatenate(
        [
            g_comm_w.ravel(),
            g_comm_b,
            g_sens_w.ravel(),
            g_sens_b,
            g_fus_w.ravel(),
            g_fus_b,
            g_out_w.ravel(),
            g_out_b,
        ]
    )


def _reshape_to_beams(y: np.ndarray, cfg: NetConfig, k_m: int) -> np.ndarray:
    tensor = y.reshape(y.shape[0], cfg.n_t, cfg.k_max, 2)
    w_raw = tensor[..., 0] + 1j * tensor[..., 1]
    return w_raw[:, :, :k_m]  # (B, n_t, k_m)


def _project_batch(w_raw: np.ndarray, p_t: float):
    norms = np.linalg.norm(w_raw, axis=(1, 2))
    positive = norms > 0.0
    scale = np.zeros_like(norms)
    scale[positive] = np.sqrt(p_t) / norms[positive]
    w = w_raw * scale[:, None, None]
    check_power(w, p_t)
    return w, norms, scale


def check_power(w: np.ndarray, p_t: float) -> None:
    """Inline guard: every beamformer must satisfy ||W||_F^2 <= p_t + tol."""
    global _power_checks
    _power_checks += 1
    sq = np.sum(w.real**2 + w.imag**2, axis=tuple(range(1, w.ndim))) if w.ndim > 2 else np.sum(w.real**2 + w.imag**2)
    if not np.all(sq <= p_t + POWER_TOL):
        raise PowerConstraintError(f"beamformer power {np.max(sq)} exceeds budget {p_t}")


def forward_batch(params: ModelParams, cfg: NetConfig, xc: np.ndarray, xs: np.ndarray, k_m: int, p_t: float) -> np.ndarray:
    """Beamformers for a feature batch: (B, n_t, k_m), each on the power sphere."""
    p = unpack(params)
    y, _ = _mlp_forward(p, xc, xs)
    w_raw = _reshape_to_beams(y, cfg, k_m)
    w, _, _ = _project_batch(w_raw, p_t)
    return w


def forward(params: ModelParams, cfg: NetConfig, scn: Scenario, sample: ChannelSample, k_m: int, p_t: float) -> np.ndarray:
    """Single-sample beamformer (n_t, k_m) for one channel draw."""
    if k_m > cfg.k_max:
        raise ValueError(f"k_m={k_m} exceeds k_max={cfg.k_max}")
    xc = comm_features(sample.comm_direct[None, :, :], cfg)
    u = sens_channel(sample.target_theta, sample.target_beta, scn)
    xs = sens_features(u[None, :], cfg)
    return forward_batch(params, cfg, xc, xs, k_m, p_t)[0]


class LossContext:
    """Precomputed tensors for one BS's training objective over a sample set.

    Holds the direct/cross channels, network input features, and the
    combiner-projected radar leakage rows, so that repeated mini-batch
    evaluations only index and multiply.
    """

    def __init__(
        self,
        cfg: NetConfig,
        scn: Scenario,
        m: int,
        h: np.ndarray,
        h_cross: dict[int, np.ndarray],
        theta: np.ndarray,
        beta: np.ndarray,
        radar_cross: dict[int, np.ndarray],
    ):
        if h.shape[0] == 0:
            raise ValueError("empty sample set")
        if not 0 <= m < scn.n_cells:
            raise IndexError(f"cell index {m} out of range")
        self.cfg = cfg
        self.scn = scn
        self.m = m
        self.k_m = scn.k_per_cell[m]
        self.h = np.asarray(h, dtype=np.complex128)  # (n, k_m, n_t)
        self.h_cross = {i: np.asarray(a, dtype=np.complex128) for i, a in h_cross.items()}
        theta = np.asarray(theta, dtype=np.float64)
        beta = np.asarray(beta, dtype=np.complex128)
        self.u = sens_channel(theta, beta, scn)  # (n, n_t)
        # Combiner rows v^H G for every interfering BS; constant per sample.
        rx = scn.rx_steering()
        v = np.stack([mrc_combiner(t, rx) for t in theta])  # (n, n_r)
        self.vg = {
            n_cell: np.einsum("br,brn->bn", v.conj(), np.asarray(g, dtype=np.complex128))
            for n_cell, g in radar_cross.items()
        }
        self.xc = comm_features(self.h, cfg)
        self.xs = sens_features(self.u, cfg)

    @classmethod
    def from_samples(cls, cfg: NetConfig, scn: Scenario, m: int, samples: Sequence[ChannelSample]) -> "LossContext":
        if len(samples) == 0:
            raise ValueError("empty sample set")
        return cls(
            cfg,
            scn,
            m,
            h=np.stack([s.comm_direct for s in samples]),
            h_cross={
                i: np.stack([s.comm_cross[i] for s in samples]) for i in range(scn.n_cells) if i != m
            },
            theta=np.array([s.target_theta for s in samples]),
            beta=np.array([s.target_beta for s in samples], dtype=np.complex128),
            radar_cross={
                n: np.stack([s.radar_cross[n] for s in samples]) for n in range(scn.n_cells) if n != m
            },
        )

    @property
    def n_samples(self) -> int:
        return self.h.shape[0]

    def _interference(self, idx: np.ndarray, peers_w: dict[int, np.ndarray]):
        """Constant interference terms: (B, k_m) comm and (B,) radar denominators."""
        bsz = len(idx)
        cross_c = np.zeros((bsz, self.k_m))
        den_s = np.full(bsz, self.scn.sigma_s_sq)
        for i, w_i in peers_w.items():
            if i == self.m:
                continue
            s_c = np.einsum("bkn,bnj->bkj", self.h_cross[i][idx].conj(), w_i)
            cross_c += np.sum(np.abs(s_c) ** 2, axis=2)
            s_r = np.einsum("bn,bnj->bj", self.vg[i][idx], w_i)
            den_s += np.sum(np.abs(s_r) ** 2, axis=1)
        return cross_c, den_s

    def evaluate(
        self,
        params: ModelParams,
        idx: np.ndarray,
        peers_w: dict[int, np.ndarray],
        want_grad: bool = True,
    ):
        """Mean loss over the indexed samples, with optional exact gradient.

        Returns (loss, grad, comm_rates, radar_rates); ``grad`` is None when
        ``want_grad`` is false. Rates are per-sample arrays.
        """
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError("empty batch")
        cfg, scn, k_m = self.cfg, self.scn, self.k_m
        bsz = idx.size
        rho = scn.rho_per_cell[self.m]
        cross_c, den_s = self._interference(idx, peers_w)

        p = unpack(params)
        y, cache = _mlp_forward(p, self.xc[idx], self.xs[idx])
        w_raw = _reshape_to_beams(y, cfg, k_m)
        w, norms, scale = _project_batch(w_raw, scn.p_t)

        h = self.h[idx]
        s_c = np.einsum("bkn,bnj->bkj", h.conj(), w)  # (B, k_m, k_m)
        p_c = s_c.real**2 + s_c.imag**2
        diag = np.arange(k_m)
        num = p_c[:, diag, diag]
        den = p_c.sum(axis=2) - num + cross_c + scn.sigma_c_sq
        gamma_c = num / den
        r_c = np.log1p(gamma_c).sum(axis=1) / _LN2  # (B,)

        u = self.u[idx]
        s_r = np.einsum("bn,bnj->bj", u.conj(), w)  # (B, k_m)
        p_num = np.sum(s_r.real**2 + s_r.imag**2, axis=1)
        gamma_s = scn.n_r * p_num / den_s
        r_s = np.log1p(gamma_s) / _LN2  # (B,)

        loss = float(-np.mean(rho * r_c + (1.0 - rho) * r_s))
        if not want_grad:
            return loss, None, r_c, r_s

        # Backward through the rate heads; packed complex convention:
        # grad stored as d/d(re) + j * d/d(im).
        d_rc = -rho / bsz
        d_rs = -(1.0 - rho) / bsz
        d_gamma_c = d_rc / ((1.0 + gamma_c) * _LN2)     # (B, k_m)
        d_num = d_gamma_c / den
        d_den = -d_gamma_c * gamma_c / den
        gp = np.repeat(d_den[:, :, None], k_m, axis=2)
        gp[:, diag, diag] = d_num
        s_hat_c = 2.0 * gp * s_c
        g_w = np.einsum("bkn,bkj->bnj", h, s_hat_c)

        d_gamma_s = d_rs / ((1.0 + gamma_s) * _LN2)     # (B,)
        d_pnum = d_gamma_s * scn.n_r / den_s
        s_hat_r = 2.0 * d_pnum[:, None] * s_r
        g_w += np.einsum("bn,bj->bnj", u, s_hat_r)

        # Backward through the power rescaling w = w_raw * sqrt(p)/||w_raw||.
        t_inner = np.sum(g_w.real * w_raw.real + g_w.imag * w_raw.imag, axis=(1, 2))
        positive = norms > 0.0
        coef = np.zeros_like(norms)
        coef[positive] = np.sqrt(scn.p_t) * t_inner[positive] / norms[positive] ** 3
        g_raw = scale[:, None, None] * g_w - coef[:, None, None] * w_raw

        g_full = np.zeros((bsz, cfg.n_t, cfg.k_max), dtype=np.complex128)
        g_full[:, :, :k_m] = g_raw
        g_y = np.stack([g_full.real, g_full.imag], axis=-1).reshape(bsz, cfg.out_dim)

        grad = _mlp_backward(p, cache, g_y, cfg)
        return loss, grad, r_c, r_s


def loss_and_grad(
    params: ModelParams,
    cfg: NetConfig,
    scn: Scenario,
    batch: Sequence[ChannelSample],
    m: int,
    peers_w: dict[int, np.ndarray] | None = None,
) -> tuple[float, np.ndarray]:
    """Mean unsupervised loss over a batch and its exact parameter gradient.

    ``peers_w`` maps every other cell index to a (B, n_t, k_i) array of that
    BS's beamformers, one per batch sample; they are held constant.
    """
    ctx = LossContext.from_samples(cfg, scn, m, batch)
    loss, grad, _, _ = ctx.evaluate(params, np.arange(len(batch)), peers_w or {})
    return loss, grad


# ---------------------------------------------------------------------------
# Serialization: JSON layout header + length-prefixed little-endian float64


def _write_array(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<Q", arr.size))
    fh.write(arr.tobytes())


def _read_array(fh) -> np.ndarray:
    (count,) = struct.unpack("<Q", fh.read(8))
    buf = fh.read(count * 8)
    if len(buf) != count * 8:
        raise ValueError("truncated parameter file")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64)


def _write_header(fh, header: dict) -> None:
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)


def _read_header(fh, magic: str) -> dict:
    (length,) = struct.unpack("<Q", fh.read(8))
    header = json.loads(fh.read(length).decode("utf-8"))
    if header.get("format") != magic:
        raise ValueError(f"not a {magic} file")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported version {header.get('version')}")
    return header


def save_params(path, params: ModelParams) -> None:
    header = {
        "format": PARAMS_MAGIC,
        "version": FORMAT_VERSION,
        "net": {"n_t": params.cfg.n_t, "k_max": params.cfg.k_max, "hidden": params.cfg.hidden},
        "layers": [[name, list(dims)] for name, dims in layer_dims(params.cfg).items()],
    }
    with open(path, "wb") as fh:
        _write_header(fh, header)
        _write_array(fh, params.data)


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        header = _read_header(fh, PARAMS_MAGIC)
        data = _read_array(fh)
    net = header["net"]
    cfg = NetConfig(n_t=net["n_t"], k_max=net["k_max"], hidden=net["hidden"])
    return ModelParams(data, cfg)


def save_adam(path, state: AdamState) -> None:
    header = {
        "format": ADAM_MAGIC,
        "version": FORMAT_VERSION,
        "step": state.step,
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
    }
    with open(path, "wb") as fh:
        _write_header(fh, header)
        _write_array(fh, state.m)
        _write_array(fh, state.v)


def load_adam(path) -> AdamState:
    with open(path, "rb") as fh:
        header = _read_header(fh, ADAM_MAGIC)
        m = _read_array(fh)
        v = _read_array(fh)
    return AdamState(
        m=m,
        v=v,
        step=header["step"],
        lr=header["lr"],
        beta1=header["beta1"],
        beta2=header["beta2"],
        eps=header["eps"],
    )
