"""The transformation-equivariant model: probabilistic Siamese encoder,
Gaussian transformation decoder, and the training objective.

The encoder maps an image to the mean and log-variance of a Gaussian
representation; a sample is drawn by the location-scale reparameterization
sample = mean + exp(logvar/2) * eps so gradients reach both heads.  One
branch sees the warped image (sample z), the other the original (sample
zt); both share weights.  The decoder runs each sample through two more
conv blocks, pools, concatenates, and regresses the mean and log-variance
of the 8 standardized corner-displacement targets.  The loss is the Gaussian
negative log-likelihood of the sampled targets, averaged over the batch.

In the deterministic baseline mode ("aet") the encoder variance is forced
to zero and the decoder variance is fixed at one, which reduces the loss to
half the mean squared target error plus a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import LOG_2PI, Tensor
from .transforms import (TARGET_DIM, TargetCodec, TransformPrior, sample_homography,
                         warp_image)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class Representation:
    """A probabilistic representation: Gaussian moments plus one sample."""

    mean: Tensor
    logvar: Tensor
    sample: Tensor


class Encoder:
    """Two NIN-style blocks (each stride 2) producing the representation mean,
    plus a 1x1-conv + batch-norm head on the same features for the
    log-variance (clamped to [LOGVAR_MIN, LOGVAR_MAX])."""

    def __init__(self, in_channels: int, widths: tuple[int, int],
                 rng: np.random.Generator, dtype=np.float64):
        w1, w2 = widths
        self.out_channels = w2
        self.block1 = nn.ConvBlock("encoder.block1", in_channels, w1, 2, rng, dtype)
        self.block2 = nn.ConvBlock("encoder.block2", w1, w2, 2, rng, dtype)
        self.logvar_conv = nn.Conv2d("encoder.logvar_conv", w2, w2, 1, 1, 0, rng, dtype)
        self.logvar_bn = nn.BatchNorm("encoder.logvar_bn", w2, dtype)

    def __call__(self, images: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        feat = self.block2(self.block1(images, training), training)
        logvar = self.logvar_bn(self.logvar_conv(feat), training)
        return feat, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    def params(self) -> list[nn.Param]:
        return nn.collect_params(self.block1, self.block2, self.logvar_conv,
                                 self.logvar_bn)

    def state(self) -> dict[str, np.ndarray]:
        return nn.collect_state(self.block1, self.block2, self.logvar_bn)


class Decoder:
    """Shared-weight blocks applied to each representation sample, pooled,
    concatenated, and mapped by one dense head to 2*TARGET_DIM outputs
    (target mean, then clamped target log-variance)."""

    def __init__(self, in_channels: int, widths: tuple[int, int],
                 rng: np.random.Generator, dtype=np.float64):
        w3, w4 = widths
        self.block3 = nn.ConvBlock("decoder.block3", in_channels, w3, 2, rng, dtype)
        self.block4 = nn.ConvBlock("decoder.block4", w3, w4, 1, rng, dtype)
        self.head = nn.Dense("decoder.head", 2 * w4, 2 * TARGET_DIM, rng, dtype)

    def _branch(self, sample: Tensor, training: bool) -> Tensor:
        return ad.global_avg_pool(self.block4(self.block3(sample, training), training))

    def __call__(self, z: Representation, zt: Representation,
                 training: bool) -> tuple[Tensor, Tensor]:
        pooled = ad.concat(self._branch(z.sample, training),
                           self._branch(zt.sample, training))
        out = self.head(pooled)
        mean = out.narrow(0, TARGET_DIM)
        logvar = out.narrow(TARGET_DIM, 2 * TARGET_DIM).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return mean, logvar

    def params(self) -> list[nn.Param]:
        return nn.collect_params(self.block3, self.block4, self.head)

    def state(self) -> dict[str, np.ndarray]:
        return nn.collect_state(self.block3, self.block4)


class AvtModel:
    """Encoder/decoder pair with a mode switch between the probabilistic
    objective ("avt") and the deterministic regression baseline ("aet")."""

    def __init__(self, in_channels: int = 1, widths: tuple[int, int, int, int] = (64, 96, 96, 96),
                 seed: int = 0, dtype=np.float64, mode: str = "avt"):
        if mode not in ("avt", "aet"):
            raise ValueError(f"unknown mode {mode!r}")
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.dtype = np.dtype(dtype)
        self.mode = mode
        self.encoder = Encoder(in_channels, self.widths[:2], rng, self.dtype)
        self.decoder = Decoder(self.widths[1], self.widths[2:], rng, self.dtype)

    def params(self) -> list[nn.Param]:
        return self.encoder.params() + self.decoder.params()

    def state(self) -> dict[str, np.ndarray]:
        return {**self.encoder.state(), **self.decoder.state()}


def encode(encoder: Encoder, images, training: bool = False) -> tuple[Tensor, Tensor]:
    """Representation mean and clamped log-variance of a batch (N,C,H,W)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if not np.isfinite(x.data).all():
        raise FloatingPointError("encoder input contains non-finite values")
    mean, logvar = encoder(x, training)
    if not (np.isfinite(mean.data).all() and np.isfinite(logvar.data).all()):
        raise FloatingPointError("encoder produced non-finite activations")
    return mean, logvar


def reparameterize(mean: Tensor, logvar: Tensor, eps: Tensor) -> Tensor:
    """Location-scale sample mean + exp(logvar/2) * eps (differentiable in
    mean and logvar)."""
    return mean + (logvar * 0.5).exp() * eps


def _represent(encoder: Encoder, images, rng: np.random.Generator | None,
               training: bool, deterministic: bool) -> Representation:
    mean, logvar = encode(encoder, images, training)
    if deterministic:
        return Representation(mean=mean, logvar=logvar, sample=mean)
    eps = Tensor(rng.standard_normal(mean.shape).astype(mean.dtype, copy=False))
    return Representation(mean=mean, logvar=logvar, sample=reparameterize(mean, logvar, eps))


def encode_transformed(encoder: Encoder, warped_images, rng, training: bool = False,
                       deterministic: bool = False) -> Representation:
    """Representation z of transformed images, with fresh noise."""
    return _represent(encoder, warped_images, rng, training, deterministic)


def encode_original(encoder: Encoder, images, rng, training: bool = False,
                    deterministic: bool = False) -> Representation:
    """Representation zt of the untransformed images, with its own fresh noise."""
    return _represent(encoder, images, rng, training, deterministic)


def decode_transform(decoder: Decoder, z: Representation, zt: Representation,
                     training: bool = False) -> tuple[Tensor, Tensor]:
    """Predicted target mean and log-variance from the pair of representations."""
    if z.sample.shape != zt.sample.shape:
        raise ad.ShapeError(f"representation shapes differ: {z.sample.shape} "
                            f"vs {zt.sample.shape}")
    mean, logvar = decoder(z, zt, training)
    if not (np.isfinite(mean.data).all() and np.isfinite(logvar.data).all()):
        raise FloatingPointError("decoder produced non-finite outputs")
    return mean, logvar


def gaussian_nll(target: np.ndarray, mean: Tensor, logvar: Tensor) -> Tensor:
    """Batch-mean Gaussian negative log-likelihood.

    0.5 * mean_i sum_j [ logvar_ij + (target_ij - mean_ij)^2 exp(-logvar_ij)
    + log 2 pi ].
    """
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=mean.dtype))
    if t.shape != mean.shape or mean.shape != logvar.shape:
        raise ad.ShapeError(f"gaussian_nll: shapes {t.shape}, {mean.shape}, "
                            f"{logvar.shape} do not match")
    n, dim = mean.shape
    resid = t - mean
    quad = resid * resid * (-logvar).exp()
    total = logvar.sum() + quad.sum() + float(n * dim) * LOG_2PI
    return total * (0.5 / n)


def avt_loss(model: AvtModel, images: np.ndarray, rng: np.random.Generator,
             prior: TransformPrior, codec: TargetCodec,
             training: bool = True) -> tuple[Tensor, dict]:
    """The empirical objective on one batch.

    Per image: draw a transformation, warp, encode both the original and the
    warped image, sample both representations, decode, and score the
    standardized target under the predicted Gaussian.  Returns the batch-mean
    negative log-likelihood (minimize it to maximize the bound) plus
    diagnostics.

    Draw order per batch: one transformation per image, then the noise for z,
    then the noise for zt (skipped in aet mode).
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ad.ShapeError(f"avt_loss expects a non-empty (N,C,H,W) batch, "
                            f"got shape {images.shape}")
    n = images.shape[0]
    aet = model.mode == "aet"

    warped = np.empty_like(images)
    targets = np.empty((n, TARGET_DIM), dtype=images.dtype)
    for i in range(n):
        _, h = sample_homography(rng, prior)
        warped[i] = warp_image(images[i], h)
        targets[i] = codec.encode(h)

    z = encode_transformed(model.encoder, warped, rng, training, deterministic=aet)
    zt = encode_original(model.encoder, images, rng, training, deterministic=aet)
    d_mean, d_logvar = decode_transform(model.decoder, z, zt, training)
    if aet:
        d_logvar = Tensor(np.zeros_like(d_logvar.data))
    loss = gaussian_nll(targets, d_mean, d_logvar)

    resid = targets - d_mean.data
    diagnostics = {
        "mean_pred_var": float(np.exp(d_logvar.data).mean()),
        "mean_resid_norm": float(np.sqrt((resid ** 2).sum(axis=1)).mean()),
        "max_abs_logvar": float(max(np.abs(z.logvar.data).max(),
                                    np.abs(d_logvar.data).max())),
        "targets": targets,
    }
    return loss, diagnostics


def constant_predictor_nll(targets: np.ndarray) -> float:
    """Negative log-likelihood of standardized targets under the zero-mean,
    unit-variance constant predictor (the no-information reference)."""
    t = np.asarray(targets, dtype=np.float64)
    return float(0.5 * ((t ** 2).sum(axis=1) + t.shape[1] * LOG_2PI).mean())


def mi_lower_bound_estimate(avg_log_q: float, codec: TargetCodec) -> tuple[float, dict]:
    """Lower bound on the transformation/representation mutual information.

    The sampler's conditional entropy term is a model-independent constant
    (transformations are drawn independently of the images); it is
    approximated here by the unit-Gaussian surrogate entropy of the
    standardized target space.  The returned metadata records that
    definition, since the estimate is only meaningful up to this constant.
    """
    entropy = codec.gaussian_surrogate_entropy()
    meta = {
        "entropy_constant": entropy,
        "entropy_definition": f"gaussian surrogate, {TARGET_DIM} standardized target dims: "
                              "D/2*(log(2*pi)+1)",
    }
    return entropy + avg_log_q, meta


def averaged_representation(encoder: Encoder, images, k_samples: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Average of k pooled representation samples per image (k=0: pooled mean).

    Pooled over space first, then averaged over samples; both operations are
    linear, so this equals pooling the averaged samples.
    """
    with ad.no_grad():
        mean, logvar = encode(encoder, images, training=False)
        pooled_mean = mean.data.mean(axis=(2, 3))
        if k_samples == 0:
            return pooled_mean
        std = np.exp(0.5 * logvar.data)
        acc = np.zeros_like(pooled_mean)
        for _ in range(k_samples):
            eps = rng.standard_normal(mean.shape).astype(mean.dtype, copy=False)
            acc += (std * eps).mean(axis=(2, 3))
        return pooled_mean + acc / k_samples
