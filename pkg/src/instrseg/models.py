"""The four encoder-decoder segmentation networks and their checkpoints.

All networks take ``batch x 3 x H x W`` input scaled to [0, 1] with H and W
divisible by 32 and return logits of shape ``batch x num_classes x H x W``.
"""
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
import torchvision
from torch import nn

from .errors import CheckpointError, ConfigError, ShapeError

FAMILIES = ("unet", "ternausnet11", "ternausnet16", "linknet34")
DISPLAY_NAMES = {
    "unet": "U-Net",
    "ternausnet11": "TernausNet-11",
    "ternausnet16": "TernausNet-16",
    "linknet34": "LinkNet-34",
}
DIVISOR = 32

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

CHECKPOINT_FORMAT = "instrseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    family: str
    num_classes: int
    pretrained_encoder: bool = None
    base_width: int = 32

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unsupported model family {self.family!r}; expected one of {', '.join(FAMILIES)}")
        if not isinstance(self.num_classes, int) or self.num_classes < 1:
            raise ConfigError(f"num_classes must be a positive integer, got {self.num_classes!r}")
        if self.pretrained_encoder is None:
            object.__setattr__(self, "pretrained_encoder", self.family != "unet")
        if self.family == "unet" and self.pretrained_encoder:
            raise ConfigError("unet has no pretrained encoder; set pretrained_encoder=False")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be positive, got {self.base_width}")

    @property
    def name(self):
        return DISPLAY_NAMES[self.family]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls) if f.name in d})


def check_input_shape(height, width):
    for axis, value in (("height", height), ("width", width)):
        if value % DIVISOR:
            raise ShapeError(f"input {axis} {value} is not divisible by {DIVISOR}")


def conv3x3_relu(in_channels, out_channels):
    return nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, padding=1), nn.ReLU(inplace=True))


class SegmentationNet(nn.Module):
    """Shared plumbing: input checks, normalization, encode/decode split.

    ``encode`` returns the skip-connection sources shallow to deep followed by
    whatever else the decoder needs; ``skip_count`` tells how many of the
    leading features are skip sources.
    """

    skip_count = 5

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        if spec.pretrained_encoder:
            mean, std = IMAGENET_MEAN, IMAGENET_STD
        else:
            mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
        self.register_buffer("input_mean", torch.tensor(mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("input_std", torch.tensor(std).view(1, 3, 1, 1), persistent=False)

    def normalize(self, x):
        return (x - self.input_mean) / self.input_std

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected batch x 3 x H x W input, got {tuple(x.shape)}")
        check_input_shape(x.shape[2], x.shape[3])
        return self.decode(self.encode(self.normalize(x)))

    def encoder_modules(self):
        raise NotImplementedError

    def encode(self, x):
        raise NotImplementedError

    def decode(self, features):
        raise NotImplementedError

    def fuse(self, upsampled, skip):
        raise NotImplementedError


class UNet(SegmentationNet):
    """Plain U-Net trained from scratch: padded convolutions, bilinear upsampling."""

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        widths = [spec.base_width * m for m in (1, 2, 4, 8, 16)]
        self.widths = widths
        self.pool = nn.MaxPool2d(2)
        encoder = []
        in_channels = 3
        for width in widths:
            encoder.append(nn.Sequential(conv3x3_relu(in_channels, width), conv3x3_relu(width, width)))
            in_channels = width
        self.encoder = nn.ModuleList(encoder)
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for deep, shallow in zip(widths[:0:-1], widths[-2::-1]):
            self.up.append(conv3x3_relu(deep, shallow))
            self.decoder.append(nn.Sequential(conv3x3_relu(2 * shallow, shallow), conv3x3_relu(shallow, shallow)))
        self.final = nn.Conv2d(widths[0], spec.num_classes, 1)

    def encoder_modules(self):
        return [self.encoder]

    def encode(self, x):
        features = []
        for level, block in enumerate(self.encoder):
            if level:
                x = self.pool(x)
            x = block(x)
            features.append(x)
        return features

    def fuse(self, upsampled, skip):
        return torch.cat([upsampled, skip], dim=1)

    def decode(self, features):
        x = features[-1]
        for up, block, skip in zip(self.up, self.decoder, features[-2::-1]):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(self.fuse(up(x), skip))
        return self.final(x)


class TernausDecoderBlock(nn.Module):
    def __init__(self, in_channels, middle_channels, out_channels):
        super().__init__()
        self.block = nn.Sequential(
            conv3x3_relu(in_channels, middle_channels),
            nn.ConvTranspose2d(middle_channels, out_channels, 3, stride=2, padding=1, output_padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class TernausNet(SegmentationNet):
    """VGG encoder with a transposed-convolution decoder and concatenation skips."""

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        builder = torchvision.models.vgg11 if spec.family == "ternausnet11" else torchvision.models.vgg16
        features = builder(weights=None).features
        # split the VGG feature stack at each max-pool: stage k ends just before pool k
        stages, current = [], []
        for layer in features:
            if isinstance(layer, nn.MaxPool2d):
                stages.append(nn.Sequential(*current))
                current = []
            else:
                current.append(layer)
        self.stages = nn.ModuleList(stages)
        self.pool = nn.MaxPool2d(2)
        self.center = TernausDecoderBlock(512, 512, 256)
        self.dec5 = TernausDecoderBlock(256 + 512, 512, 256)
        self.dec4 = TernausDecoderBlock(256 + 512, 512, 128)
        self.dec3 = TernausDecoderBlock(128 + 256, 256, 64)
        self.dec2 = TernausDecoderBlock(64 + 128, 128, 32)
        self.dec1 = conv3x3_relu(32 + 64, 32)
        self.final = nn.Conv2d(32, spec.num_classes, 1)

    def encoder_modules(self):
        return [self.stages]

    def encode(self, x):
        features = []
        for level, stage in enumerate(self.stages):
            if level:
                x = self.pool(x)
            x = stage(x)
            features.append(x)
        features.append(self.pool(x))
        return features

    def fuse(self, upsampled, skip):
        return torch.cat([upsampled, skip], dim=1)

    def decode(self, features):
        conv1, conv2, conv3, conv4, conv5, bottom = features
        x = self.center(bottom)
        x = self.dec5(self.fuse(x, conv5))
        x = self.dec4(self.fuse(x, conv4))
        x = self.dec3(self.fuse(x, conv3))
        x = self.dec2(self.fuse(x, conv2))
        x = self.dec1(self.fuse(x, conv1))
        return self.final(x)


class LinkDecoderBlock(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        mid = in_channels // 4
        self.reduce = nn.Sequential(nn.Conv2d(in_channels, mid, 1), nn.BatchNorm2d(mid), nn.ReLU(inplace=True))
        self.upsample = nn.Sequential(
            nn.ConvTranspose2d(mid, mid, 4, stride=2, padding=1), nn.BatchNorm2d(mid), nn.ReLU(inplace=True)
        )
        self.expand = nn.Sequential(nn.Conv2d(mid, out_channels, 1), nn.BatchNorm2d(out_channels), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.expand(self.upsample(self.reduce(x)))


class LinkNet34(SegmentationNet):
    """ResNet34 encoder; each decoder output is added to the matching encoder map."""

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        resnet = torchvision.models.resnet34(weights=None)
        self.stem = nn.Sequential(resnet.conv1, resnet.bn1, resnet.relu)
        self.maxpool = resnet.maxpool
        self.layer1 = resnet.layer1
        self.layer2 = resnet.layer2
        self.layer3 = resnet.layer3
        self.layer4 = resnet.layer4
        self.dec4 = LinkDecoderBlock(512, 256)
        self.dec3 = LinkDecoderBlock(256, 128)
        self.dec2 = LinkDecoderBlock(128, 64)
        self.dec1 = LinkDecoderBlock(64, 64)
        self.head = nn.Sequential(
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            conv3x3_relu(32, 32),
            nn.Conv2d(32, spec.num_classes, 1),
        )

    def encoder_modules(self):
        return [self.stem, self.layer1, self.layer2, self.layer3, self.layer4]

    def encode(self, x):
        e0 = self.stem(x)
        e1 = self.layer1(self.maxpool(e0))
        e2 = self.layer2(e1)
        e3 = self.layer3(e2)
        e4 = self.layer4(e3)
        return [e0, e1, e2, e3, e4]

    def fuse(self, upsampled, skip):
        return upsampled + skip

    def decode(self, features):
        e0, e1, e2, e3, e4 = features
        x = self.fuse(self.dec4(e4), e3)
        x = self.fuse(self.dec3(x), e2)
        x = self.fuse(self.dec2(x), e1)
        x = self.fuse(self.dec1(x), e0)
        return self.head(x)


_CLASSES = {"unet": UNet, "ternausnet11": TernausNet, "ternausnet16": TernausNet, "linknet34": LinkNet34}
_TORCHVISION = {
    "ternausnet11": ("vgg11", "VGG11_Weights"),
    "ternausnet16": ("vgg16", "VGG16_Weights"),
    "linknet34": ("resnet34", "ResNet34_Weights"),
}


def _backbone_state_dict(family, encoder_weights):
    if encoder_weights is not None:
        state = torch.load(encoder_weights, map_location="cpu", weights_only=True)
        if "state_dict" in state:
            state = state["state_dict"]
        return state
    name, weights_enum = _TORCHVISION[family]
    weights = getattr(torchvision.models, weights_enum).DEFAULT
    try:
        return weights.get_state_dict(progress=False)
    except Exception as exc:
        raise CheckpointError(
            f"could not fetch pretrained {name} weights ({exc}); pass a local state dict via encoder_weights"
        ) from exc


def _load_encoder(net, state):
    """Copy torchvision backbone weights (``features.*`` or resnet keys) into the encoder."""
    spec = net.spec
    if spec.family.startswith("ternausnet"):
        convs = [m for stage in net.stages for m in stage if isinstance(m, nn.Conv2d)]
        keys = sorted(
            {k.rsplit(".", 1)[0] for k in state if k.startswith("features.")},
            key=lambda k: int(k.split(".")[1]),
        )
        if len(keys) != len(convs):
            raise CheckpointError(f"encoder weights have {len(keys)} conv layers, network expects {len(convs)}")
        for conv, key in zip(convs, keys):
            conv.weight.data.copy_(state[f"{key}.weight"])
            conv.bias.data.copy_(state[f"{key}.bias"])
        return
    mapping = {"stem.0": "conv1", "stem.1": "bn1"}
    own = net.state_dict()
    for key in own:
        if not key.startswith(("stem.", "layer")):
            continue
        prefix, _, rest = key.partition(".")
        if prefix == "stem":
            index, _, leaf = rest.partition(".")
            source = f"{mapping['stem.' + index]}.{leaf}"
        else:
            source = key
        if source not in state:
            raise CheckpointError(f"encoder weights lack {source}")
        own[key].copy_(state[source])


def build_model(spec: ModelSpec, encoder_weights=None) -> SegmentationNet:
    """Build the network for ``spec``.

    Parameters are always randomly initialised first, so for a fixed torch
    seed the decoder is identical whether or not encoder weights are loaded.
    With ``spec.pretrained_encoder`` the ImageNet encoder weights are read
    from ``encoder_weights`` (a torchvision state-dict file) or downloaded.
    """
    if not isinstance(spec, ModelSpec):
        raise ConfigError(f"expected a ModelSpec, got {type(spec).__name__}")
    net = _CLASSES[spec.family](spec)
    if spec.pretrained_encoder:
        _load_encoder(net, _backbone_state_dict(spec.family, encoder_weights))
    return net


def forward(net: SegmentationNet, batch: torch.Tensor) -> torch.Tensor:
    return net(batch)


def encoder_feature_shapes(spec: ModelSpec, input_hw):
    """(channels, h, w) of each skip-connection source, shallow to deep.

    Shapes come from running the encoder of the built graph on the meta
    device, so no arithmetic is duplicated here.
    """
    height, width = input_hw
    check_input_shape(height, width)
    with torch.device("meta"):
        net = _CLASSES[spec.family](spec)
        features = net.encode(torch.zeros(1, 3, height, width))
    return [tuple(int(s) for s in f.shape[1:]) for f in features[: net.skip_count]]


def encoder_parameters(net: SegmentationNet):
    for module in net.encoder_modules():
        yield from module.parameters()


def decoder_parameters(net: SegmentationNet):
    encoder_ids = {id(p) for p in encoder_parameters(net)}
    return (p for p in net.parameters() if id(p) not in encoder_ids)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, net: SegmentationNet, metadata=None):
    import io

    from ._io import atomic_write_bytes

    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": net.spec.to_dict(),
        "state_dict": net.state_dict(),
        "metadata": dict(metadata or {}),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def read_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an instrseg checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path, expected_spec: ModelSpec = None, task=None):
    """Restore a network; returns ``(net, metadata)``.

    The stored spec is validated against ``expected_spec`` and the stored task
    against ``task`` before any weights are touched.
    """
    payload = read_checkpoint(path)
    spec = ModelSpec.from_dict(payload["spec"])
    metadata = payload.get("metadata", {})
    if expected_spec is not None and expected_spec != spec:
        raise CheckpointError(f"{path}: checkpoint spec {spec} does not match expected {expected_spec}")
    if task is not None and metadata.get("task") not in (None, str(task)):
        raise CheckpointError(f"{path}: checkpoint was trained for task {metadata.get('task')!r}, not {str(task)!r}")
    # weights come from the checkpoint, never from the network
    net = _CLASSES[spec.family](spec)
    try:
        net.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameter mismatch ({exc})") from exc
    return net, metadata
