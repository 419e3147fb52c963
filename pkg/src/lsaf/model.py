"""The fusion network: dual feature extractors, a linear self-attention
module combining channel and spatial attention, and a learned decision
fusion head.

Layer layout (patch size s, spectral depth r after PCA):

  HSI branch    conv3d 1→8 (7,3,3) → conv3d 8→16 (5,3,3) → conv3d 16→32 (3,3,3)
                → reshape to 2-D maps → conv2d →64 (3,3, pad 1)
  LiDAR branch  conv2d 1→16 (3,3) → conv2d 16→32 → conv2d 32→64

Every conv is followed by batch norm and ReLU. Both branches emit
64×(s−6)×(s−6) maps; that equality is asserted when the model is built, so a
configuration that would desynchronize the branches never constructs.

The attention module gates channels with a sigmoid gate shared between the
two modalities (their transposed features pass through per-modality inner
layers, one shared outer layer, and one sigmoid), re-weights the fused
tensor per spatial position with a softmax, and recalibrates the
concatenated features with a squeeze-and-excite bottleneck. The decision
head classifies each path separately and sums the three logit vectors with
two learned scalar weights on the single-modality paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

FEATURE_CHANNELS = 64


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters that fix every tensor shape in the network."""

    num_classes: int
    pca_dims: int = 30
    patch: int = 11
    hidden: int = 128
    se_reduction: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.patch % 2 == 0 or self.patch < 7:
            raise ConfigError(
                f"patch size must be odd and >= 7 (three 3x3 reductions), got {self.patch}"
            )
        if self.pca_dims < 13:
            raise ConfigError(
                "spectral depth must be >= 13: the three spectral kernels (7, 5, 3) "
                f"consume 12 bands, got {self.pca_dims}"
            )
        if self.hidden < 1:
            raise ConfigError(f"hidden width must be positive, got {self.hidden}")
        if self.se_reduction < 1 or (2 * FEATURE_CHANNELS) % self.se_reduction:
            raise ConfigError(
                f"squeeze-excite reduction {self.se_reduction} must divide {2 * FEATURE_CHANNELS}"
            )

    @property
    def feature_side(self) -> int:
        return self.patch - 6

    @property
    def feature_pixels(self) -> int:
        return self.feature_side ** 2


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform init on ±sqrt(6/fan_in): empirical variance 2/fan_in."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ----------------------------------------------------------------------
# layers


class Linear:
    """y = x @ weight + bias over the trailing axis."""

    def __init__(self, rng, in_features: int, out_features: int):
        self.weight = Tensor(
            kaiming_uniform(rng, (in_features, out_features), in_features),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(
                f"linear layer expects {self.weight.shape[0]} input features, got {x.shape}"
            )
        return x @ self.weight + self.bias

    def named_params(self, prefix: str) -> dict:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class BatchNorm:
    """Channel-axis batch normalization with running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=T.default_dtype())
        self.running_var = np.ones(channels, dtype=T.default_dtype())
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            running_mean=self.running_mean,
            running_var=self.running_var,
            training=training,
            momentum=self.momentum,
            eps=self.eps,
        )

    def named_params(self, prefix: str) -> dict:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def named_state(self, prefix: str) -> dict:
        return {
            f"{prefix}.running_mean": self.running_mean,
            f"{prefix}.running_var": self.running_var,
        }


class ConvBlock:
    """Convolution (2-D or 3-D by kernel rank) + batch norm + ReLU."""

    def __init__(self, rng, in_channels: int, out_channels: int, kernel: tuple, padding=0):
        self.kernel = tuple(kernel)
        self.padding = padding
        fan_in = in_channels * int(np.prod(self.kernel))
        self.kernels = Tensor(
            kaiming_uniform(rng, (out_channels, in_channels) + self.kernel, fan_in),
            requires_grad=True,
        )
        self.bn = BatchNorm(out_channels)
        self._conv = T.conv3d if len(self.kernel) == 3 else T.conv2d

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = self._conv(x, self.kernels, stride=1, padding=self.padding)
        return T.relu(self.bn(out, training))

    def out_spatial(self, in_spatial: tuple) -> tuple:
        pads = (self.padding,) * len(self.kernel) if isinstance(self.padding, int) else self.padding
        return tuple(
            n + 2 * p - k + 1 for n, k, p in zip(in_spatial, self.kernel, pads)
        )

    def named_params(self, prefix: str) -> dict:
        out = {f"{prefix}.kernels": self.kernels}
        out.update(self.bn.named_params(f"{prefix}.bn"))
        return out

    def named_state(self, prefix: str) -> dict:
        return self.bn.named_state(f"{prefix}.bn")


# ----------------------------------------------------------------------
# feature extractors


class HsiExtractor:
    """Spectral-spatial stack: three 3-D conv blocks, then one 2-D block
    after folding the spectral axis into channels."""

    def __init__(self, rng, config: ModelConfig):
        self.blocks3d = [
            ConvBlock(rng, 1, 8, (7, 3, 3)),
            ConvBlock(rng, 8, 16, (5, 3, 3)),
            ConvBlock(rng, 16, 32, (3, 3, 3)),
        ]
        spectral, side = config.pca_dims, config.patch
        for block in self.blocks3d:
            spectral, side, _ = block.out_spatial((spectral, side, side))
        self.folded_channels = 32 * spectral
        self.block2d = ConvBlock(rng, self.folded_channels, FEATURE_CHANNELS, (3, 3), padding=1)
        self._out_side = self.block2d.out_spatial((side, side))[0]

    def output_shape(self) -> tuple:
        return (FEATURE_CHANNELS, self._out_side, self._out_side)

    def __call__(self, patches: Tensor, training: bool) -> Tensor:
        if patches.ndim != 4:
            raise ShapeError(f"expected (n, bands, s, s) patches, got {patches.shape}")
        n, bands, s, _ = patches.shape
        x = patches.reshape(n, 1, bands, s, s)
        for block in self.blocks3d:
            x = block(x, training)
        n_, c, d, h, w = x.shape
        x = x.reshape(n_, c * d, h, w)
        return self.block2d(x, training)

    def named_params(self, prefix: str) -> dict:
        out: dict = {}
        for i, block in enumerate(self.blocks3d, start=1):
            out.update(block.named_params(f"{prefix}.block{i}"))
        out.update(self.block2d.named_params(f"{prefix}.block4"))
        return out

    def named_state(self, prefix: str) -> dict:
        out: dict = {}
        for i, block in enumerate(self.blocks3d, start=1):
            out.update(block.named_state(f"{prefix}.block{i}"))
        out.update(self.block2d.named_state(f"{prefix}.block4"))
        return out


class LidarExtractor:
    """Three 2-D conv blocks over the single-band elevation patch."""

    def __init__(self, rng, config: ModelConfig):
        self.blocks = [
            ConvBlock(rng, 1, 16, (3, 3)),
            ConvBlock(rng, 16, 32, (3, 3)),
            ConvBlock(rng, 32, FEATURE_CHANNELS, (3, 3)),
        ]
        side = config.patch
        for block in self.blocks:
            side = block.out_spatial((side, side))[0]
        self._out_side = side

    def output_shape(self) -> tuple:
        return (FEATURE_CHANNELS, self._out_side, self._out_side)

    def __call__(self, patches: Tensor, training: bool) -> Tensor:
        if patches.ndim != 4 or patches.shape[1] != 1:
            raise ShapeError(f"expected (n, 1, s, s) patches, got {patches.shape}")
        x = patches
        for block in self.blocks:
            x = block(x, training)
        return x

    def named_params(self, prefix: str) -> dict:
        out: dict = {}
        for i, block in enumerate(self.blocks, start=1):
            out.update(block.named_params(f"{prefix}.block{i}"))
        return out

    def named_state(self, prefix: str) -> dict:
        out: dict = {}
        for i, block in enumerate(self.blocks, start=1):
            out.update(block.named_state(f"{prefix}.block{i}"))
        return out


# ----------------------------------------------------------------------
# attention


def channel_linear(layer: Linear, x: Tensor) -> Tensor:
    """Apply a linear layer to the channel axis of (n, c, hw) features."""
    return layer(x.transpose((0, 2, 1))).transpose((0, 2, 1))


def concat_transpose(gated_h: Tensor, gated_l: Tensor) -> Tensor:
    """Stack two (n, hw, c) gated maps along channels, back to (n, 2c, hw)."""
    if gated_h.shape != gated_l.shape:
        raise ShapeError(
            f"gated features disagree: {gated_h.shape} vs {gated_l.shape}"
        )
    return T.concat([gated_h, gated_l], axis=2).transpose((0, 2, 1))


def spatial_attention(recalibrated: Tensor, fused: Tensor) -> Tensor:
    """Weight each spatial position: recalibrated ⊙ softmax(fused over hw)."""
    if recalibrated.shape != fused.shape:
        raise ShapeError(
            f"spatial attention inputs disagree: {recalibrated.shape} vs {fused.shape}"
        )
    return recalibrated * T.softmax(fused, axis=-1)


class SqueezeExcite:
    """Global-average squeeze, bottleneck excitation, sigmoid channel gate."""

    def __init__(self, rng, channels: int, reduction: int):
        if channels % reduction:
            raise ConfigError(f"reduction {reduction} must divide {channels} channels")
        self.fc1 = Linear(rng, channels, channels // reduction)
        self.fc2 = Linear(rng, channels // reduction, channels)

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.mean(axis=2)  # (n, c)
        excite = T.sigmoid(self.fc2(T.relu(self.fc1(squeeze))))
        n, c = excite.shape
        return x * excite.reshape(n, c, 1)

    def named_params(self, prefix: str) -> dict:
        out = self.fc1.named_params(f"{prefix}.fc1")
        out.update(self.fc2.named_params(f"{prefix}.fc2"))
        return out


class LinearSelfAttention:
    """Channel gating + spatial softmax weighting over the fused features.

    All inputs and outputs are (n, c, hw) maps. The channel gate is computed
    once from both modalities and applied to both; the outer layer and the
    sigmoid are shared storage, the inner layers are per-modality.
    """

    def __init__(self, rng, channels: int, se_reduction: int):
        self.channels = channels
        self.pre_hsi = Linear(rng, channels, channels)
        self.pre_lidar = Linear(rng, channels, channels)
        self.pre_joint = Linear(rng, 2 * channels, 2 * channels)
        self.gate_hsi = Linear(rng, channels, channels)
        self.gate_lidar = Linear(rng, channels, channels)
        self.gate_out = Linear(rng, channels, channels)
        self.se = SqueezeExcite(rng, 2 * channels, se_reduction)

    def _check(self, x: Tensor, what: str) -> None:
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise ShapeError(f"{what} must be (n, {self.channels}, hw), got {x.shape}")

    def pre_transform(self, feat_h: Tensor, feat_l: Tensor):
        """Per-modality channel transforms plus the transformed concatenation."""
        self._check(feat_h, "hsi features")
        self._check(feat_l, "lidar features")
        if feat_h.shape != feat_l.shape:
            raise ShapeError(f"feature shapes disagree: {feat_h.shape} vs {feat_l.shape}")
        hat_h = channel_linear(self.pre_hsi, feat_h)
        hat_l = channel_linear(self.pre_lidar, feat_l)
        joint = channel_linear(self.pre_joint, T.concat([feat_h, feat_l], axis=1))
        return hat_h, hat_l, joint

    def channel_attention(self, hat_h: Tensor, hat_l: Tensor):
        """One shared sigmoid gate from both modalities, applied to both.

        Returns the gated maps in (n, hw, c) orientation.
        """
        t_h = hat_h.transpose((0, 2, 1))
        t_l = hat_l.transpose((0, 2, 1))
        gate = T.sigmoid(self.gate_out(self.gate_hsi(t_h) + self.gate_lidar(t_l)))
        return gate * t_h, gate * t_l

    def __call__(self, feat_h: Tensor, feat_l: Tensor) -> Tensor:
        hat_h, hat_l, joint = self.pre_transform(feat_h, feat_l)
        gated_h, gated_l = self.channel_attention(hat_h, hat_l)
        fused = concat_transpose(gated_h, gated_l)
        recalibrated = self.se(joint)
        return spatial_attention(recalibrated, fused)

    def named_params(self, prefix: str) -> dict:
        out: dict = {}
        out.update(self.pre_hsi.named_params(f"{prefix}.pre_hsi"))
        out.update(self.pre_lidar.named_params(f"{prefix}.pre_lidar"))
        out.update(self.pre_joint.named_params(f"{prefix}.pre_joint"))
        out.update(self.gate_hsi.named_params(f"{prefix}.gate_hsi"))
        out.update(self.gate_lidar.named_params(f"{prefix}.gate_lidar"))
        out.update(self.gate_out.named_params(f"{prefix}.gate_out"))
        out.update(self.se.named_params(f"{prefix}.se"))
        return out


# ----------------------------------------------------------------------
# classifier heads and fusion


class LinearBlock:
    """flatten → linear → ReLU → linear → class logits."""

    def __init__(self, rng, in_features: int, hidden: int, num_classes: int):
        self.fc1 = Linear(rng, in_features, hidden)
        self.fc2 = Linear(rng, hidden, num_classes)

    def __call__(self, x: Tensor) -> Tensor:
        flat = x.reshape(x.shape[0], -1)
        return self.fc2(T.relu(self.fc1(flat)))

    def named_params(self, prefix: str) -> dict:
        out = self.fc1.named_params(f"{prefix}.fc1")
        out.update(self.fc2.named_params(f"{prefix}.fc2"))
        return out


class DecisionFusion:
    """Three per-path classifiers whose logits are summed with learned
    scalar weights on the two single-modality paths."""

    def __init__(self, rng, feature_size: int, hidden: int, num_classes: int):
        self.head_hsi = LinearBlock(rng, feature_size, hidden, num_classes)
        self.head_lidar = LinearBlock(rng, feature_size, hidden, num_classes)
        self.head_fused = LinearBlock(rng, 2 * feature_size, hidden, num_classes)
        self.weight_hsi = Tensor(np.array(1.0), requires_grad=True)
        self.weight_lidar = Tensor(np.array(1.0), requires_grad=True)

    def __call__(self, feat_h: Tensor, feat_l: Tensor, feat_fused: Tensor):
        """Returns (combined, hsi, lidar, fused) logits."""
        logits_h = self.head_hsi(feat_h)
        logits_l = self.head_lidar(feat_l)
        logits_f = self.head_fused(feat_fused)
        combined = self.weight_hsi * logits_h + self.weight_lidar * logits_l + logits_f
        return combined, logits_h, logits_l, logits_f

    def named_params(self, prefix: str) -> dict:
        out: dict = {}
        out.update(self.head_hsi.named_params(f"{prefix}.head_hsi"))
        out.update(self.head_lidar.named_params(f"{prefix}.head_lidar"))
        out.update(self.head_fused.named_params(f"{prefix}.head_fused"))
        out[f"{prefix}.weight_hsi"] = self.weight_hsi
        out[f"{prefix}.weight_lidar"] = self.weight_lidar
        return out


# ----------------------------------------------------------------------
# the full model


MODES = ("full", "hsi", "lidar")


class LsafModel:
    """The complete network, or a single-branch ablation of it.

    `mode` selects what `forward` computes and which parameters train:
    "full" runs both branches, the attention module, and the fusion head;
    "hsi" / "lidar" run one extractor into its own classifier only.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, mode: str = "full"):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        self.config = config
        self.mode = mode
        rng = np.random.default_rng(seed)
        self.hsi_extractor = HsiExtractor(rng, config)
        self.lidar_extractor = LidarExtractor(rng, config)

        shape_h = self.hsi_extractor.output_shape()
        shape_l = self.lidar_extractor.output_shape()
        if shape_h != shape_l:
            raise ContractError(
                f"extractor outputs must agree; hsi {shape_h} vs lidar {shape_l}"
            )
        channels, side, _ = shape_h
        self.feature_shape = shape_h
        self.feature_size = channels * side * side

        self.attention = LinearSelfAttention(rng, channels, config.se_reduction)
        self.fusion = DecisionFusion(rng, self.feature_size, config.hidden, config.num_classes)

    # -- plumbing ------------------------------------------------------

    def extract_features(self, hsi_patches: Tensor, lidar_patches: Tensor, training: bool = False):
        """Run both extractors and flatten the maps to (n, c, hw)."""
        map_h = self.hsi_extractor(hsi_patches, training)
        map_l = self.lidar_extractor(lidar_patches, training)
        n, c = map_h.shape[0], map_h.shape[1]
        hw = map_h.shape[2] * map_h.shape[3]
        return map_h.reshape(n, c, hw), map_l.reshape(n, c, hw)

    def forward(self, hsi_patches, lidar_patches, training: bool = False) -> Tensor:
        """Class logits (n, K) for a batch of co-located patch pairs."""
        hsi_patches = self._as_tensor(hsi_patches)
        lidar_patches = self._as_tensor(lidar_patches)
        if self.mode == "hsi":
            feat = self.hsi_extractor(hsi_patches, training)
            return self.fusion.head_hsi(feat.reshape(feat.shape[0], -1))
        if self.mode == "lidar":
            feat = self.lidar_extractor(lidar_patches, training)
            return self.fusion.head_lidar(feat.reshape(feat.shape[0], -1))
        combined, _, _, _ = self.forward_parts(hsi_patches, lidar_patches, training)
        return combined

    def forward_parts(self, hsi_patches, lidar_patches, training: bool = False):
        """Full-path forward returning (combined, hsi, lidar, fused) logits."""
        hsi_patches = self._as_tensor(hsi_patches)
        lidar_patches = self._as_tensor(lidar_patches)
        feat_h, feat_l = self.extract_features(hsi_patches, lidar_patches, training)
        fused = self.attention(feat_h, feat_l)
        n = fused.shape[0]
        return self.fusion(
            feat_h.reshape(n, -1),
            feat_l.reshape(n, -1),
            fused.reshape(n, -1),
        )

    @staticmethod
    def _as_tensor(x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x))

    # -- parameter access ----------------------------------------------

    def params(self) -> dict:
        """Trainable tensors for the current mode, name → Tensor."""
        if self.mode == "hsi":
            out = self.hsi_extractor.named_params("hsi")
            out.update(self.fusion.head_hsi.named_params("fusion.head_hsi"))
            return out
        if self.mode == "lidar":
            out = self.lidar_extractor.named_params("lidar")
            out.update(self.fusion.head_lidar.named_params("fusion.head_lidar"))
            return out
        out = self.hsi_extractor.named_params("hsi")
        out.update(self.lidar_extractor.named_params("lidar"))
        out.update(self.attention.named_params("attention"))
        out.update(self.fusion.named_params("fusion"))
        return out

    def param_groups(self) -> dict:
        """Coarse grouping used by diagnostics: name → list of tensor names."""
        groups: dict[str, list[str]] = {}
        for name in self.params():
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def state_dict(self) -> dict:
        """All weights plus batch-norm running statistics, name → array."""
        out = {name: p.data for name, p in self._all_params().items()}
        out.update(self.hsi_extractor.named_state("hsi"))
        out.update(self.lidar_extractor.named_state("lidar"))
        return out

    def _all_params(self) -> dict:
        out = self.hsi_extractor.named_params("hsi")
        out.update(self.lidar_extractor.named_params("lidar"))
        out.update(self.attention.named_params("attention"))
        out.update(self.fusion.named_params("fusion"))
        return out

    def load_state(self, state: dict) -> None:
        """Load weights saved by `state_dict`; extra keys (preprocessing,
        optimizer state) are ignored, missing or mis-shaped model keys fail
        naming the first offending tensor."""
        own_params = self._all_params()
        own_state = {name: arr for name, arr in self.state_dict().items()
                     if name not in own_params}
        for name in list(own_params) + list(own_state):
            if name not in state:
                raise ContractError(f"checkpoint is missing tensor '{name}'")
        for name, param in own_params.items():
            incoming = np.asarray(state[name])
            if tuple(incoming.shape) != tuple(param.shape):
                raise ShapeError(
                    f"checkpoint tensor '{name}' has shape {tuple(incoming.shape)}, "
                    f"model expects {tuple(param.shape)}"
                )
            param.data = incoming.astype(param.data.dtype)
            param.grad = None
        for name, arr in own_state.items():
            incoming = np.asarray(state[name])
            if incoming.shape != arr.shape:
                raise ShapeError(
                    f"checkpoint tensor '{name}' has shape {tuple(incoming.shape)}, "
                    f"model expects {tuple(arr.shape)}"
                )
            arr[...] = incoming.astype(arr.dtype)

    def zero_grads(self) -> None:
        for p in self._all_params().values():
            p.grad = None
