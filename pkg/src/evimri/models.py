"""Network zoo: patch classifiers and the translation model bundle.

Classifier recipe (all variants, 64x64 patches): one depth-collapsing 3D
convolution, four 3x3 2D convolutions at widths 16/32/32/64/64 with two
2x2 max-pools, batch norm after every convolution except output layers,
then a fully connected head.  The multi-stream variant runs the same
extractor instance over its T2 and ADC stacks (shared weights), fuses by
channel concatenation, and adds one more conv/pool stage before the head.

The translation bundle holds two generators (image + noise vector in,
translated image + bounded mask out), two per-domain discriminators, one
pair discriminator, and two noise encoders.  Layer counts follow the
adversarial-consistency translation lineage scaled down to a configurable
base width for desk-scale runs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .translation import GeneratorOutput

CHECKPOINT_SCHEMA_VERSION = 1

CLASSIFIER_VARIANTS = ("t2_only", "mpmri", "vol_mpmri", "ms_mpmri", "mpmri_coteaching")
_VARIANT_CHANNELS = {
    "t2_only": 3,
    "mpmri": 2,
    "mpmri_coteaching": 2,
    "vol_mpmri": 6,
    "ms_mpmri": 6,  # two 3-channel stacks fed as one tensor, split internally
}
_HEADS = ("softmax_prob", "evidence")
_EVIDENCE_ACTIVATIONS = ("softplus", "relu", "exp")
_PATCH_SIZE = 64


@dataclass(frozen=True)
class ClassifierSpec:
    """Shape and head contract for one classifier variant."""

    variant: str
    head: str = "evidence"
    input_shape: tuple[int, int, int] | None = None
    num_classes: int = 2
    evidence_activation: str = "softplus"

    def __post_init__(self) -> None:
        if self.variant not in CLASSIFIER_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.head not in _HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.num_classes != 2:
            raise ValueError("the task is binary; num_classes must be 2")
        if self.evidence_activation not in _EVIDENCE_ACTIVATIONS:
            raise ValueError(f"unknown evidence activation {self.evidence_activation!r}")
        expected = (_PATCH_SIZE, _PATCH_SIZE, _VARIANT_CHANNELS[self.variant])
        if self.input_shape is None:
            object.__setattr__(self, "input_shape", expected)
        elif tuple(self.input_shape) != expected:
            raise ValueError(f"variant {self.variant!r} requires input shape {expected}, got {tuple(self.input_shape)}")

    @property
    def in_channels(self) -> int:
        return self.input_shape[2]


class _DepthCollapseConv(nn.Module):
    """3D convolution whose kernel depth equals the input depth.

    Treats the channel stack as a depth axis, so a 64x64xD patch collapses
    to a 2D feature map in one valid-depth step.
    """

    def __init__(self, depth: int, out_channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv3d(1, out_channels, kernel_size=(depth, 3, 3), padding=(0, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x.unsqueeze(1)).squeeze(2)


class _FeatureExtractor(nn.Module):
    """1x 3D conv + 4x 2D conv + 2 max-pools; output is 64ch at 16x16."""

    def __init__(self, depth: int) -> None:
        super().__init__()
        self.stem = _DepthCollapseConv(depth, 16)
        self.stem_bn = nn.BatchNorm2d(16)
        self.body = nn.Sequential(
            nn.Conv2d(16, 32, 3, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, 64, 3, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(torch.relu(self.stem_bn(self.stem(x))))


class PatchClassifier(nn.Module):
    """Binary patch classifier; forward emits probabilities or evidence."""

    def __init__(self, spec: ClassifierSpec) -> None:
        super().__init__()
        self.spec = spec
        self.multi_stream = spec.variant == "ms_mpmri"
        depth = 3 if self.multi_stream else spec.in_channels
        self.extractor = _FeatureExtractor(depth)
        feat_hw = _PATCH_SIZE // 4
        if self.multi_stream:
            self.fusion = nn.Sequential(
                nn.Conv2d(128, 64, 3, padding=1),
                nn.BatchNorm2d(64),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            )
            fc_in = 64 * (feat_hw // 2) ** 2
        else:
            self.fusion = None
            fc_in = 64 * feat_hw**2
        self.fc = nn.Linear(fc_in, spec.num_classes)

    def extract_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.extractor(x)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (B, {self.spec.in_channels}, {_PATCH_SIZE}, {_PATCH_SIZE}) input, got {tuple(x.shape)}")
        if self.multi_stream:
            feats = torch.cat([self.extractor(x[:, :3]), self.extractor(x[:, 3:])], dim=1)
            feats = self.fusion(feats)
        else:
            feats = self.extractor(x)
        return self.fc(feats.flatten(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.logits(x)
        if self.spec.head == "softmax_prob":
            return torch.softmax(z, dim=-1)
        act = self.spec.evidence_activation
        if act == "softplus":
            return nn.functional.softplus(z)
        if act == "relu":
            return torch.relu(z)
        return torch.exp(z.clamp(max=30.0))

    def predicted_probabilities(self, outputs: torch.Tensor) -> torch.Tensor:
        """Map forward outputs to class probabilities for either head."""
        if self.spec.head == "softmax_prob":
            return outputs
        alpha = outputs + 1.0
        return alpha / alpha.sum(dim=-1, keepdim=True)


def build_classifier(spec: ClassifierSpec) -> PatchClassifier:
    """Construct the classifier for a validated spec."""
    return PatchClassifier(spec)


@dataclass(frozen=True)
class TranslationNetConfig:
    image_size: int = 64
    base_width: int = 32
    noise_dim: int = 16
    mask_init: float = 0.85  # starting foreground level of the mask channel

    def __post_init__(self) -> None:
        size = self.image_size
        if size < 64 or (size & (size - 1)) != 0:
            raise ValueError("image_size must be a power of two >= 64")
        if self.noise_dim <= 0:
            raise ValueError("noise_dim must be positive")
        if self.base_width <= 0:
            raise ValueError("base_width must be positive")
        if not 0.0 < self.mask_init < 1.0:
            raise ValueError("mask_init must be in (0, 1)")


class _FilmResBlock(nn.Module):
    """Residual block with feature-wise noise modulation at the bottleneck."""

    def __init__(self, channels: int, noise_dim: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(channels, affine=True)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(channels, affine=True)
        self.film = nn.Linear(noise_dim, 2 * channels)

    def forward(self, h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        scale, shift = self.film(z).chunk(2, dim=-1)
        out = torch.relu(self.norm1(self.conv1(h)))
        out = out * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        out = self.norm2(self.conv2(out))
        return torch.relu(h + out)


class MaskedGenerator(nn.Module):
    """Encoder-decoder emitting a translated image (tanh) and mask (sigmoid).

    The mask channel's output bias starts at logit(mask_init) so training
    begins with the mask near the top of the allowed foreground band
    instead of the uninformative 0.5 plateau of the binarization term.
    """

    def __init__(self, cfg: TranslationNetConfig) -> None:
        super().__init__()
        w = cfg.base_width
        self.noise_dim = cfg.noise_dim
        mask_init = cfg.mask_init
        self.encode = nn.Sequential(
            nn.Conv2d(1, w, 7, padding=3),
            nn.InstanceNorm2d(w, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w, affine=True),
            nn.ReLU(inplace=True),
        )
        self.res1 = _FilmResBlock(4 * w, cfg.noise_dim)
        self.res2 = _FilmResBlock(4 * w, cfg.noise_dim)
        self.decode = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * w, 2 * w, 3, padding=1),
            nn.InstanceNorm2d(2 * w, affine=True),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1),
            nn.InstanceNorm2d(w, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2, 7, padding=3),
        )
        with torch.no_grad():
            self.decode[-1].bias[1] = math.log(mask_init / (1.0 - mask_init))

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> GeneratorOutput:
        if z.ndim != 2 or z.shape[-1] != self.noise_dim:
            raise ValueError(f"noise vector must be (B, {self.noise_dim}), got {tuple(z.shape)}")
        if z.shape[0] != x.shape[0]:
            raise ValueError("noise batch does not match image batch")
        h = self.encode(x)
        h = self.res2(self.res1(h, z), z)
        out = self.decode(h)
        return GeneratorOutput(image=torch.tanh(out[:, :1]), mask=torch.sigmoid(out[:, 1:]))


class ScoreMapDiscriminator(nn.Module):
    """PatchGAN-style discriminator returning a spatial score map.

    No normalization layers: they would whiten per-image statistics, and
    global intensity/contrast is exactly what separates the two domains.
    """

    def __init__(self, cfg: TranslationNetConfig, in_channels: int = 1) -> None:
        super().__init__()
        w = cfg.base_width
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * w, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class PairDiscriminator(ScoreMapDiscriminator):
    """Scores (reference, candidate) image pairs stacked channel-wise."""

    def __init__(self, cfg: TranslationNetConfig) -> None:
        super().__init__(cfg, in_channels=2)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError("pair images must share shape")
        return self.net(torch.cat([a, b], dim=1))


class NoiseEncoder(nn.Module):
    """Maps an image to a noise vector of the configured dimension."""

    def __init__(self, cfg: TranslationNetConfig) -> None:
        super().__init__()
        w = cfg.base_width
        self.conv = nn.Sequential(
            nn.Conv2d(1, w, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(4 * w, cfg.noise_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.conv(x).flatten(1))


@dataclass
class TranslationModelBundle:
    """All seven networks of the translation stage plus their config."""

    config: TranslationNetConfig
    gen_s_to_t: MaskedGenerator
    gen_t_to_s: MaskedGenerator
    disc_s: ScoreMapDiscriminator
    disc_t: ScoreMapDiscriminator
    disc_pair: PairDiscriminator
    enc_z_s: NoiseEncoder
    enc_z_t: NoiseEncoder

    def generator_parameters(self):
        mods = (self.gen_s_to_t, self.gen_t_to_s, self.enc_z_s, self.enc_z_t)
        for m in mods:
            yield from m.parameters()

    def discriminator_parameters(self):
        for m in (self.disc_s, self.disc_t, self.disc_pair):
            yield from m.parameters()

    def modules(self) -> dict[str, nn.Module]:
        return {
            "gen_s_to_t": self.gen_s_to_t,
            "gen_t_to_s": self.gen_t_to_s,
            "disc_s": self.disc_s,
            "disc_t": self.disc_t,
            "disc_pair": self.disc_pair,
            "enc_z_s": self.enc_z_s,
            "enc_z_t": self.enc_z_t,
        }

    def train(self) -> None:
        for m in self.modules().values():
            m.train()

    def eval(self) -> None:
        for m in self.modules().values():
            m.eval()


def build_translation_bundle(config: TranslationNetConfig | None = None) -> TranslationModelBundle:
    cfg = config or TranslationNetConfig()
    return TranslationModelBundle(
        config=cfg,
        gen_s_to_t=MaskedGenerator(cfg),
        gen_t_to_s=MaskedGenerator(cfg),
        disc_s=ScoreMapDiscriminator(cfg),
        disc_t=ScoreMapDiscriminator(cfg),
        disc_pair=PairDiscriminator(cfg),
        enc_z_s=NoiseEncoder(cfg),
        enc_z_t=NoiseEncoder(cfg),
    )


def save_classifier(path, model: PatchClassifier) -> None:
    torch.save(
        {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "kind": "classifier",
            "spec": asdict(model.spec),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_classifier(path) -> PatchClassifier:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    spec_d = dict(payload["spec"])
    spec_d["input_shape"] = tuple(spec_d["input_shape"]) if spec_d.get("input_shape") else None
    model = build_classifier(ClassifierSpec(**spec_d))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def save_translation_bundle(path, bundle: TranslationModelBundle) -> None:
    torch.save(
        {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "kind": "translation_bundle",
            "config": asdict(bundle.config),
            "state_dicts": {name: m.state_dict() for name, m in bundle.modules().items()},
        },
        path,
    )


def load_translation_bundle(path) -> TranslationModelBundle:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "translation_bundle":
        raise ValueError(f"{path} is not a translation checkpoint")
    bundle = build_translation_bundle(TranslationNetConfig(**payload["config"]))
    for name, module in bundle.modules().items():
        module.load_state_dict(payload["state_dicts"][name])
    bundle.eval()
    return bundle
