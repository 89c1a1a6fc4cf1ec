"""The gated one-step residual operator and its ablation variants.

A shared modulated MLP trunk turns ``(z, time code, action)`` into
features. The selected model reads it twice, once per time code, and
feeds three heads:

* a scalar potential whose negative input-gradient is the downhill drift,
* low-rank factors ``P, Q`` forming ``S = P Q^T - Q P^T`` (exactly
  antisymmetric), applied as ``P (Q^T z) - Q (P^T z)``,
* a positive per-dimension noise scale ``softplus(raw) + 1e-4``.

The prediction is ``z + alpha(delta) * (-grad U + S z + sigma * eps)``.
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
from torch import nn

from .autodiff import DTYPE, input_gradient
from .exceptions import ConfigError, NumericalError
from .time_codes import FourierBank, GateTau, Time2Vec, alpha_gate, delta_scale_from_tau

VARIANTS = ("selected", "unconstrained", "tied_time2vec", "tied_fourier")
TRUNKS = ("mlp",)
SIGMA_FLOOR = 1e-4


@dataclass
class OperatorConfig:
    dim: int
    width: int = 64
    depth: int = 3
    rank: int = 16
    variant: str = "selected"
    trunk: str = "mlp"
    n_periodic: int = 8
    tau_init: float = 1.0
    delta_scale: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.trunk not in TRUNKS:
            raise ConfigError(f"unknown trunk {self.trunk!r}; expected one of {TRUNKS}")
        for name in ("dim", "width", "depth", "rank", "n_periodic"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.tau_init > 0:
            raise ConfigError("tau_init must be positive")
        if self.delta_scale is None:
            self.delta_scale = delta_scale_from_tau(self.tau_init)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown operator config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ResidualParts:
    """Evaluated residual components for a batch of source states.

    ``grad_term``, ``curl_term``, ``sigma`` and ``potential`` are ``None``
    for the unconstrained variant, which has no factorisation.
    """

    alpha: torch.Tensor
    z_det: torch.Tensor
    grad_term: Optional[torch.Tensor] = None
    curl_term: Optional[torch.Tensor] = None
    sigma: Optional[torch.Tensor] = None
    potential: Optional[torch.Tensor] = None


def _linear(n_in, n_out, generator, zero=False, bias=True):
    layer = nn.Linear(n_in, n_out, bias=bias, dtype=DTYPE)
    with torch.no_grad():
        if zero:
            layer.weight.zero_()
        else:
            bound = 1.0 / math.sqrt(n_in)
            layer.weight.copy_((torch.rand(n_out, n_in, generator=generator, dtype=DTYPE) * 2 - 1) * bound)
        if bias:
            layer.bias.zero_()
    return layer


class ModulatedTrunk(nn.Module):
    """Residual MLP with per-layer feature-wise scale/shift from a time embedding.

    The modulation generator starts at zero, so an untrained trunk ignores
    the embedding entirely (the adaLN-zero starting point).
    """

    def __init__(self, dim, width, depth, generator, noise_input=False):
        super().__init__()
        self.width, self.depth = width, depth
        self.input = _linear(dim, width, generator)
        self.noise_input = _linear(dim, width, generator, bias=False) if noise_input else None
        self.layers = nn.ModuleList(_linear(width, width, generator) for _ in range(depth))
        self.modulation = _linear(width, 2 * width * depth, generator, zero=True)

    def forward(self, z, emb, action=None, noise=None):
        if z.shape[-1] != self.input.in_features:
            raise ValueError(f"state has dimension {z.shape[-1]}, trunk expects {self.input.in_features}")
        h = self.input(z)
        if noise is not None:
            h = h + self.noise_input(noise)
        if action is not None:
            h = h + action
        mods = self.modulation(emb).reshape(emb.shape[0], self.depth, 2, self.width)
        for i, layer in enumerate(self.layers):
            scale, shift = mods[:, i, 0], mods[:, i, 1]
            h = h + torch.tanh(layer(h * (1 + scale) + shift))
        return h


class WaddingtonOperator(nn.Module):
    def __init__(self, config, _unconstrained_hidden=None):
        super().__init__()
        self.config = config
        cfg = config
        gen = torch.Generator().manual_seed(cfg.seed)
        d, w = cfg.dim, cfg.width
        self.gate = GateTau(cfg.tau_init)
        self.register_buffer("delta_scale", torch.tensor(float(cfg.delta_scale), dtype=DTYPE))

        uses_t2v = cfg.variant in ("selected", "unconstrained", "tied_time2vec")
        self.time2vec = Time2Vec(cfg.n_periodic, generator=gen) if uses_t2v else None
        self.fourier = FourierBank()
        self.trunk = ModulatedTrunk(d, w, cfg.depth, gen, noise_input=cfg.variant == "unconstrained")

        if cfg.variant == "tied_fourier":
            self.embed_u = _linear(self.fourier.size, w, gen)
        else:
            self.embed_u = _linear(self.time2vec.size, w, gen)
        self.embed_curl = _linear(self.fourier.size, w, gen) if cfg.variant == "selected" else None

        if cfg.variant == "unconstrained":
            hidden = _unconstrained_hidden or matched_hidden_width(cfg)
            self.residual_head = nn.Sequential(
                _linear(w, hidden, gen), nn.Tanh(), _linear(hidden, d, gen, zero=True)
            )
        else:
            self.potential_head = _linear(w, 1, gen, zero=True)
            self.curl_head = _linear(w, 2 * d * cfg.rank, gen)
            with torch.no_grad():
                # P block starts at zero so S = 0, while Q stays random: with
                # both factors at zero the bilinear S would have zero gradient.
                self.curl_head.weight[: d * cfg.rank].zero_()
            self.noise_head = _linear(w, d, gen, zero=True)

    # ----------------------------------------------------------------- basics
    @property
    def dim(self):
        return self.config.dim

    @property
    def variant(self):
        return self.config.variant

    @property
    def tau(self):
        return self.gate.tau

    def config_dict(self):
        return asdict(self.config)

    def n_parameters(self):
        return sum(p.numel() for p in self.parameters())

    def alpha(self, delta):
        return self.gate(delta)

    def _delta_vector(self, delta, n):
        delta = torch.as_tensor(delta, dtype=DTYPE)
        if delta.ndim == 0:
            delta = delta.expand(n)
        if delta.shape != (n,):
            raise ValueError(f"delta must be a scalar or have shape ({n},), got {tuple(delta.shape)}")
        if (delta < 0).any():
            raise ValueError("elapsed time delta must be nonnegative")
        return delta

    def _check_state(self, z):
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(f"expected states of shape (n, {self.dim}), got {tuple(z.shape)}")

    def embeddings(self, delta_vec):
        """Time embeddings ``(E_U, E_curl)``; the same tensor for tied variants."""
        t = delta_vec / self.delta_scale
        if self.variant == "tied_fourier":
            e_u = torch.tanh(self.embed_u(self.fourier(t)))
        else:
            e_u = torch.tanh(self.embed_u(self.time2vec(t)))
        if self.variant == "selected":
            return e_u, torch.tanh(self.embed_curl(self.fourier(t)))
        return e_u, e_u

    def trunk_features(self, z, emb, action=None):
        return self.trunk(z, emb, action)

    def features(self, z, delta, action=None):
        """Branch features ``(h_U, h_curl)``; one shared tensor for tied variants."""
        self._check_state(z)
        e_u, e_curl = self.embeddings(self._delta_vector(delta, z.shape[0]))
        h_u = self.trunk(z, e_u, action)
        h_curl = h_u if e_curl is e_u else self.trunk(z, e_curl, action)
        return h_u, h_curl

    def _require_structured(self):
        if self.variant == "unconstrained":
            raise TypeError("the unconstrained variant has no potential/antisymmetric/noise heads")

    # ------------------------------------------------------------ components
    def potential(self, z, delta, action=None):
        self._require_structured()
        h_u, _ = self.features(z, delta, action)
        return self.potential_head(h_u).squeeze(-1)

    def potential_grad(self, z, delta, action=None, create_graph=True):
        self._require_structured()
        with torch.enable_grad():
            if not z.requires_grad:
                z = z.detach().requires_grad_(True)
            grad = input_gradient(self.potential(z, delta, action), z, create_graph=create_graph)
        return grad if torch.is_grad_enabled() else grad.detach()

    def _factors(self, h_curl):
        d, r = self.dim, self.config.rank
        out = self.curl_head(h_curl)
        return out[:, : d * r].reshape(-1, d, r), out[:, d * r :].reshape(-1, d, r)

    def curl_factors(self, z, delta, action=None):
        self._require_structured()
        _, h_curl = self.features(z, delta, action)
        return self._factors(h_curl)

    def antisym_operator(self, z, delta, action=None):
        """Materialised ``S = P Q^T - Q P^T``, shape ``(n, d, d)``."""
        p, q = self.curl_factors(z, delta, action)
        pq = p @ q.transpose(1, 2)
        return pq - pq.transpose(1, 2)

    @staticmethod
    def _apply_antisym(p, q, z):
        zc = z.unsqueeze(-1)
        return (p @ (q.transpose(1, 2) @ zc) - q @ (p.transpose(1, 2) @ zc)).squeeze(-1)

    def curl_term(self, z, delta, action=None):
        p, q = self.curl_factors(z, delta, action)
        return self._apply_antisym(p, q, z)

    def noise_scale(self, z, delta, action=None):
        self._require_structured()
        h_u, _ = self.features(z, delta, action)
        return nn.functional.softplus(self.noise_head(h_u)) + SIGMA_FLOOR

    def unconstrained_residual(self, z, delta, noise, action=None):
        if self.variant != "unconstrained":
            raise TypeError("only the unconstrained variant has a direct residual head")
        self._check_state(z)
        e_u, _ = self.embeddings(self._delta_vector(delta, z.shape[0]))
        return self.residual_head(self.trunk(z, e_u, action, noise=noise))

    # ------------------------------------------------------------ prediction
    def residual_parts(self, z, delta, action=None, create_graph=True):
        """Deterministic parts of the residual, evaluated in one trunk pass per branch."""
        self._check_state(z)
        n = z.shape[0]
        delta_vec = self._delta_vector(delta, n)
        alpha = self.gate(delta_vec).unsqueeze(-1)
        if self.variant == "unconstrained":
            r0 = self.unconstrained_residual(z, delta_vec, torch.zeros_like(z), action)
            return ResidualParts(alpha=alpha, z_det=z + alpha * r0)

        # The drift is an input gradient, so the graph is needed even when the
        # caller runs under no_grad; create_graph=False keeps the result detached.
        with torch.enable_grad():
            zg = z if z.requires_grad else z.detach().requires_grad_(True)
            e_u, e_curl = self.embeddings(delta_vec)
            h_u = self.trunk(zg, e_u, action)
            h_curl = h_u if e_curl is e_u else self.trunk(zg, e_curl, action)
            u = self.potential_head(h_u).squeeze(-1)
            grad_term = -input_gradient(u, zg, create_graph=create_graph)
        if not torch.is_grad_enabled():
            zg, h_curl, h_u, u = zg.detach(), h_curl.detach(), h_u.detach(), u.detach()
        p, q = self._factors(h_curl)
        curl_term = self._apply_antisym(p, q, zg)
        sigma = nn.functional.softplus(self.noise_head(h_u)) + SIGMA_FLOOR
        for name, value in (("grad_term", grad_term), ("curl_term", curl_term), ("sigma", sigma)):
            if not torch.isfinite(value).all():
                raise NumericalError(f"non-finite values in residual component {name}", provenance=name)
        z_det = zg + alpha * (grad_term + curl_term)
        return ResidualParts(
            alpha=alpha, z_det=z_det, grad_term=grad_term, curl_term=curl_term, sigma=sigma, potential=u
        )

    def deterministic(self, z, delta, action=None, create_graph=True):
        return self.residual_parts(z, delta, action, create_graph=create_graph).z_det

    def one_step(self, z, delta, noise, action=None, create_graph=True):
        """K stochastic one-step samples for each source; returns ``(samples, parts)``.

        ``noise`` has shape ``(n, K, d)`` (or ``(n, d)`` for K = 1); the
        deterministic parts are shared across the K draws.
        """
        squeeze = noise.ndim == 2
        if squeeze:
            noise = noise.unsqueeze(1)
        n, k, d = noise.shape
        if n != z.shape[0] or d != self.dim:
            raise ValueError(f"noise shape {tuple(noise.shape)} does not match states {tuple(z.shape)}")
        if self.variant == "unconstrained":
            parts = self.residual_parts(z, delta, action, create_graph)
            z_rep = z.unsqueeze(1).expand(n, k, d).reshape(n * k, d)
            delta_vec = self._delta_vector(delta, n).unsqueeze(1).expand(n, k).reshape(-1)
            act = None
            if action is not None and action.ndim == 2:
                act = action.unsqueeze(1).expand(n, k, -1).reshape(n * k, -1)
            elif action is not None:
                act = action
            r = self.unconstrained_residual(z_rep, delta_vec, noise.reshape(n * k, d), act)
            samples = z.unsqueeze(1) + parts.alpha.unsqueeze(1) * r.reshape(n, k, d)
        else:
            parts = self.residual_parts(z, delta, action, create_graph)
            spread = parts.sigma.unsqueeze(1) * noise
            det = (parts.grad_term + parts.curl_term).unsqueeze(1)
            samples = z.unsqueeze(1) + parts.alpha.unsqueeze(1) * (det + spread)
        if not torch.isfinite(samples).all():
            raise NumericalError("non-finite one-step prediction", provenance="one_step")
        return (samples.squeeze(1) if squeeze else samples), parts


def null_action(width):
    """The NULL action token: a zero vector of trunk width."""
    return torch.zeros(width, dtype=DTYPE)


def matched_hidden_width(config):
    """Hidden width of the unconstrained residual head that matches the selected model's size."""
    selected = WaddingtonOperator(OperatorConfig(**{**asdict(config), "variant": "selected"}))
    target = selected.n_parameters()
    probe = WaddingtonOperator(config, _unconstrained_hidden=1)
    d, w = config.dim, config.width
    base = probe.n_parameters() - (w * 1 + 1 + 1 * d)
    return max(1, round((target - base - d) / (w + 1 + d)))


def build_variant(kind, dim, **kwargs):
    """Construct one of :data:`VARIANTS` with otherwise identical settings."""
    return WaddingtonOperator(OperatorConfig(dim=dim, variant=kind, **kwargs))
