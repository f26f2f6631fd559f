"""The conditional-prior variational classifier.

A small convolutional encoder feeds an amortized Gaussian posterior over an
n-dimensional latent; classification conditions on both the latent sample and
the pooled image features. The latent prior is either standard normal (base
objective) or produced from a rasterized annotation map by a parallel
annotation encoder plus prior net (annotation-conditioned objective).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import GaussianLatent, Tensor
from .errors import DimensionError, InputError

LOG_VAR_LIMIT = 30.0

GROUP_NAMES = (
    "encoder",
    "annotation_encoder",
    "post_mlp1",
    "post_mlp2",
    "prior_net",
    "ch1",
    "ch2",
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    latent_dim: int = 128
    label_count: int = 4
    hidden: int = 512

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.latent_dim < 1 or self.label_count < 1 or self.hidden < 1:
            raise InputError("latent_dim, label_count and hidden must be >= 1")
        depth = len(self.channels)
        if depth < 1:
            raise InputError("channel plan must contain at least one stage")
        if self.image_size % (1 << depth) != 0:
            raise InputError(
                f"image_size {self.image_size} not divisible by 2^{depth}"
            )

    @property
    def feat_channels(self) -> int:
        return self.channels[-1]

    @property
    def feat_size(self) -> int:
        return self.image_size >> len(self.channels)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels": list(self.channels),
            "latent_dim": self.latent_dim,
            "label_count": self.label_count,
            "hidden": self.hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            image_size=int(d["image_size"]),
            channels=tuple(d["channels"]),
            latent_dim=int(d["latent_dim"]),
            label_count=int(d["label_count"]),
            hidden=int(d["hidden"]),
        )


@dataclass
class ParamGroup:
    name: str
    tensors: dict[str, Tensor]
    frozen: bool = False

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = bool(frozen)
        for t in self.tensors.values():
            t.requires_grad = not self.frozen


@dataclass
class ModelParams:
    """Named parameter groups with per-group freeze flags."""

    groups: dict[str, ParamGroup] = field(default_factory=dict)

    def __getitem__(self, name: str) -> ParamGroup:
        return self.groups[name]

    def named_tensors(self):
        """Yield (group, tensor name, tensor) in canonical order."""
        for gname in GROUP_NAMES:
            group = self.groups[gname]
            for tname, t in group.tensors.items():
                yield gname, tname, t

    def apply_freeze(self, frozen_by_group: dict[str, bool]) -> None:
        for gname, flag in frozen_by_group.items():
            self.groups[gname].set_frozen(flag)

    def clone(self) -> "ModelParams":
        out = ModelParams()
        for gname in GROUP_NAMES:
            g = self.groups[gname]
            tensors = {
                n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                for n, t in g.tensors.items()
            }
            out.groups[gname] = ParamGroup(gname, tensors, g.frozen)
        return out

    def zero_group(self, name: str) -> None:
        for t in self.groups[name].tensors.values():
            t.data = np.zeros_like(t.data)

    def group_blob(self, name: str) -> bytes:
        """Concatenated little-endian float64 bytes of one group (test hook)."""
        parts = [t.data.astype("<f8").tobytes() for t in self.groups[name].tensors.values()]
        return b"".join(parts)


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _conv_group(rng, name, in_ch, channels) -> ParamGroup:
    tensors: dict[str, Tensor] = {}
    cin = in_ch
    for i, cout in enumerate(channels):
        tensors[f"conv{i}_w"] = Tensor(
            _he_normal(rng, (cout, cin, 3, 3), fan_in=cin * 9), requires_grad=True
        )
        tensors[f"conv{i}_b"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    return ParamGroup(name, tensors)


def _mlp_group(rng, name, in_dim, hidden, out_dim) -> ParamGroup:
    tensors = {
        "w1": Tensor(_he_normal(rng, (hidden, in_dim), in_dim), requires_grad=True),
        "b1": Tensor(np.zeros(hidden), requires_grad=True),
        "w2": Tensor(_he_normal(rng, (out_dim, hidden), hidden), requires_grad=True),
        "b2": Tensor(np.zeros(out_dim), requires_grad=True),
    }
    return ParamGroup(name, tensors)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """He-normal weights, zero biases; deterministic in (cfg, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7061726D]))
    params = ModelParams()
    C, n, h = cfg.feat_channels, cfg.latent_dim, cfg.hidden
    params.groups["encoder"] = _conv_group(rng, "encoder", 1, cfg.channels)
    params.groups["annotation_encoder"] = _conv_group(rng, "annotation_encoder", 1, cfg.channels)
    params.groups["post_mlp1"] = _mlp_group(rng, "post_mlp1", C, h, h)
    params.groups["post_mlp2"] = _mlp_group(rng, "post_mlp2", h, h, 2 * n)
    params.groups["prior_net"] = _mlp_group(rng, "prior_net", C, h, 2 * n)
    params.groups["ch1"] = _mlp_group(rng, "ch1", C, h, h)
    params.groups["ch2"] = _mlp_group(rng, "ch2", h + n, h, cfg.label_count)
    return params


def reinit_annotation_side(params: ModelParams, cfg: ModelConfig, seed: int) -> None:
    """Freshly initialize the annotation encoder and prior net (stage-2 entry)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x616E6E6F]))
    fresh_enc = _conv_group(rng, "annotation_encoder", 1, cfg.channels)
    fresh_prior = _mlp_group(rng, "prior_net", cfg.feat_channels, cfg.hidden, 2 * cfg.latent_dim)
    for name, group in (("annotation_encoder", fresh_enc), ("prior_net", fresh_prior)):
        old = params.groups[name]
        for tname, t in group.tensors.items():
            old.tensors[tname].data = t.data
        old.set_frozen(old.frozen)


class VClassifier:
    """Forward passes and the two training objectives."""

    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params

    # -- building blocks ----------------------------------------------------

    def _conv_stack(self, x, group_name: str) -> tuple[Tensor, Tensor]:
        t = dc.as_tensor(x)
        if t.ndim != 4 or t.shape[1] != 1 or t.shape[2] != self.cfg.image_size or t.shape[3] != self.cfg.image_size:
            raise DimensionError(
                f"expected (B,1,{self.cfg.image_size},{self.cfg.image_size}), got {t.shape}"
            )
        g = self.params[group_name]
        h = t
        for i in range(len(self.cfg.channels)):
            h = dc.relu(dc.conv2d(h, g.tensors[f"conv{i}_w"], g.tensors[f"conv{i}_b"], stride=2, pad=1))
        return h, dc.global_avg_pool(h)

    def _mlp(self, x: Tensor, group_name: str) -> Tensor:
        g = self.params[group_name]
        h = dc.relu(dc.linear(x, g.tensors["w1"], g.tensors["b1"]))
        return dc.linear(h, g.tensors["w2"], g.tensors["b2"])

    def _split_gaussian(self, out: Tensor) -> GaussianLatent:
        n = self.cfg.latent_dim
        mu = dc.slice_cols(out, 0, n)
        log_var = dc.clamp(dc.slice_cols(out, n, 2 * n), -LOG_VAR_LIMIT, LOG_VAR_LIMIT)
        return GaussianLatent(mu, log_var)

    # -- forward operations --------------------------------------------------

    def encode(self, x) -> tuple[Tensor, Tensor]:
        """Last convolutional activation (kept for CAMs) and its global pool."""
        return self._conv_stack(x, "encoder")

    def posterior(self, feat_vec: Tensor) -> GaussianLatent:
        h = dc.relu(self._mlp(feat_vec, "post_mlp1"))
        return self._split_gaussian(self._mlp(h, "post_mlp2"))

    def prior_conditional(self, c) -> GaussianLatent:
        _, vec = self._conv_stack(c, "annotation_encoder")
        return self._split_gaussian(self._mlp(vec, "prior_net"))

    def standard_prior(self, batch: int) -> GaussianLatent:
        zeros = np.zeros((batch, self.cfg.latent_dim))
        return GaussianLatent(Tensor(zeros), Tensor(zeros.copy()))

    def sample_latent(self, g: GaussianLatent, rng: np.random.Generator) -> Tensor:
        eps = Tensor(rng.standard_normal(g.mu.shape))
        return dc.add(g.mu, dc.mul(dc.exp(dc.scale(g.log_var, 0.5)), eps))

    def classify(self, z: Tensor, feat_vec: Tensor) -> Tensor:
        h_x = dc.relu(self._mlp(feat_vec, "ch1"))
        return self._mlp(dc.concat(h_x, z, axis=1), "ch2")

    def classify_from_feat_map(self, feat_map: Tensor) -> Tensor:
        """Logits recomputed from a (possibly detached) feature-map tensor."""
        feat_vec = dc.global_avg_pool(feat_map)
        q = self.posterior(feat_vec)
        return self.classify(q.mu, feat_vec)

    # -- objectives ----------------------------------------------------------

    def _nll_and_q(self, x, y, rng, sample_count: int):
        _, feat_vec = self.encode(x)
        q = self.posterior(feat_vec)
        nll = None
        for _ in range(sample_count):
            z = self.sample_latent(q, rng)
            term = dc.bce_with_logits(self.classify(z, feat_vec), y)
            nll = term if nll is None else dc.add(nll, term)
        if sample_count > 1:
            nll = dc.scale(nll, 1.0 / sample_count)
        return nll, q

    def loss_base(self, x, y, beta: float, rng, sample_count: int = 1):
        """Monte Carlo classification loss plus beta * KL(q || N(0, I))."""
        nll, q = self._nll_and_q(x, y, rng, sample_count)
        kl = dc.gaussian_kl(q, self.standard_prior(q.mu.shape[0]))
        loss = dc.add(nll, dc.scale(kl, beta))
        return loss, {"nll": nll.item(), "kl": kl.item()}

    def loss_sub(self, x, y, c, beta: float, rng, sample_count: int = 1):
        """As loss_base, but the prior is conditioned on annotation maps c."""
        nll, q = self._nll_and_q(x, y, rng, sample_count)
        kl = dc.gaussian_kl(q, self.prior_conditional(c))
        loss = dc.add(nll, dc.scale(kl, beta))
        return loss, {"nll": nll.item(), "kl": kl.item()}

    # -- evaluation ----------------------------------------------------------

    def predict_logits(self, x) -> np.ndarray:
        """Deterministic logits with z = posterior mean (evaluation mode)."""
        with dc.no_grad():
            _, feat_vec = self.encode(x)
            q = self.posterior(feat_vec)
            return self.classify(q.mu, feat_vec).data

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        xs = np.asarray(x, dtype=np.float64)
        outs = []
        for lo in range(0, xs.shape[0], batch_size):
            logits = self.predict_logits(xs[lo : lo + batch_size])
            outs.append(1.0 / (1.0 + np.exp(-logits)))
        return np.concatenate(outs, axis=0)
