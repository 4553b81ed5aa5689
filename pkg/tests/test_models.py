import hashlib

import pytest
import torch
import torchvision
from hypothesis import given, settings
from hypothesis import strategies as st

from instrseg.errors import CheckpointError, ConfigError, ShapeError
from instrseg.losses import combined_loss
from instrseg.models import (
    FAMILIES,
    ModelSpec,
    build_model,
    decoder_parameters,
    encoder_feature_shapes,
    encoder_parameters,
    forward,
    load_checkpoint,
    save_checkpoint,
)

VGG16_WIDTHS = (64, 128, 256, 512, 512)
RESNET34_WIDTHS = (64, 64, 128, 256, 512)


def _net(family, num_classes=1, **kw):
    torch.manual_seed(0)
    kw.setdefault("pretrained_encoder", False)
    return build_model(ModelSpec(family, num_classes, **kw))


def _checksum(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# spec validation

def test_unet_has_no_pretrained_variant():
    with pytest.raises(ConfigError):
        ModelSpec("unet", 1, pretrained_encoder=True)
    assert ModelSpec("unet", 1).pretrained_encoder is False
    assert ModelSpec("ternausnet16", 1).pretrained_encoder is True


def test_spec_errors():
    with pytest.raises(ConfigError, match="unsupported"):
        ModelSpec("segnet", 1)
    with pytest.raises(ConfigError, match="num_classes"):
        ModelSpec("unet", 0)


# channel plans

def test_unet_deepest_width():
    shapes = encoder_feature_shapes(ModelSpec("unet", 1, base_width=32), (256, 320))
    assert [s[0] for s in shapes] == [32, 64, 128, 256, 512]


def test_ternausnet16_feature_shapes():
    shapes = encoder_feature_shapes(ModelSpec("ternausnet16", 1), (256, 320))
    assert shapes == [(64, 256, 320), (128, 128, 160), (256, 64, 80), (512, 32, 40), (512, 16, 20)]


def test_ternausnet11_feature_widths():
    shapes = encoder_feature_shapes(ModelSpec("ternausnet11", 1), (64, 64))
    assert tuple(s[0] for s in shapes) == VGG16_WIDTHS


def test_linknet34_feature_widths():
    shapes = encoder_feature_shapes(ModelSpec("linknet34", 8), (256, 320))
    assert tuple(s[0] for s in shapes) == RESNET34_WIDTHS


@pytest.mark.parametrize("family", FAMILIES)
def test_feature_shapes_halve(family):
    shapes = encoder_feature_shapes(ModelSpec(family, 1, pretrained_encoder=False), (128, 160))
    for (_, h0, w0), (_, h1, w1) in zip(shapes, shapes[1:]):
        assert (h1 * 2, w1 * 2) == (h0, w0)


@pytest.mark.parametrize("family", FAMILIES)
def test_feature_shapes_match_real_forward(family):
    net = _net(family).eval()
    with torch.no_grad():
        features = net.encode(net.normalize(torch.rand(1, 3, 64, 96)))
    real = [tuple(f.shape[1:]) for f in features[: net.skip_count]]
    assert real == encoder_feature_shapes(net.spec, (64, 96))


def test_feature_shapes_reject_bad_size():
    with pytest.raises(ShapeError):
        encoder_feature_shapes(ModelSpec("unet", 1), (100, 96))


def test_linknet_reduction_by_four():
    net = _net("linknet34", 8)
    seen = []
    net.dec4.reduce.register_forward_hook(lambda m, i, o: seen.append(o.shape[1]))
    with torch.no_grad():
        net.eval()(torch.rand(1, 3, 64, 64))
    assert seen == [128]


# forward

@pytest.mark.parametrize("family", FAMILIES)
def test_minimal_input(family):
    net = _net(family, 5).eval()
    with torch.no_grad():
        assert forward(net, torch.rand(1, 3, 32, 32)).shape == (1, 5, 32, 32)


@pytest.mark.parametrize("family", FAMILIES)
def test_indivisible_input(family):
    net = _net(family)
    with pytest.raises(ShapeError, match="height 100"):
        net(torch.rand(1, 3, 100, 100))
    with pytest.raises(ShapeError, match="width 40"):
        net(torch.rand(1, 3, 64, 40))


def test_full_resolution_batch():
    net = _net("linknet34").eval()
    with torch.no_grad():
        out = net(torch.rand(2, 3, 1024, 1280))
    assert out.shape == (2, 1, 1024, 1280)
    assert torch.isfinite(out).all()


@pytest.mark.parametrize("family", FAMILIES)
@settings(max_examples=4, deadline=None)
@given(h=st.sampled_from([32, 64, 96, 128]), w=st.sampled_from([32, 64, 96, 128]))
def test_shape_preservation(family, h, w):
    net = _nets(family)
    with torch.no_grad():
        assert net(torch.rand(1, 3, h, w)).shape == (1, 1, h, w)


_CACHE = {}


def _nets(family):
    if family not in _CACHE:
        _CACHE[family] = _net(family).eval()
    return _CACHE[family]


@pytest.mark.parametrize("family", FAMILIES)
def test_eval_forward_deterministic(family):
    net = _nets(family)
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(net(x), net(x))


@pytest.mark.parametrize("family", FAMILIES)
def test_every_parameter_gets_gradient(family):
    net = _net(family, 5, base_width=8) if family == "unet" else _net(family, 5)
    net.train()
    x = torch.rand(2, 3, 64, 64)
    target = torch.randint(0, 5, (2, 64, 64))
    combined_loss(net(x), target, "parts").total.backward()
    for name, p in net.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name
        assert p.grad.abs().sum() > 0, name


# pretrained encoders

_BACKBONES = {"ternausnet11": "vgg11", "ternausnet16": "vgg16", "linknet34": "resnet34"}


@pytest.fixture(scope="module")
def backbone_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("weights")
    files = {}
    for family, name in _BACKBONES.items():
        torch.manual_seed(99)
        state = getattr(torchvision.models, name)(weights=None).state_dict()
        files[family] = root / f"{name}.pth"
        torch.save(state, files[family])
    return files


@pytest.mark.parametrize("family", list(_BACKBONES))
def test_pretrained_changes_encoder_only(family, backbone_files):
    torch.manual_seed(3)
    plain = build_model(ModelSpec(family, 1, pretrained_encoder=False))
    torch.manual_seed(3)
    loaded = build_model(ModelSpec(family, 1, pretrained_encoder=True), encoder_weights=backbone_files[family])
    assert _checksum(encoder_parameters(plain)) != _checksum(encoder_parameters(loaded))
    assert _checksum(decoder_parameters(plain)) == _checksum(decoder_parameters(loaded))


def test_pretrained_weights_land_in_encoder(backbone_files):
    state = torch.load(backbone_files["ternausnet11"], weights_only=True)
    net = build_model(ModelSpec("ternausnet11", 1), encoder_weights=backbone_files["ternausnet11"])
    assert torch.equal(net.stages[0][0].weight, state["features.0.weight"])
    assert torch.equal(net.stages[4][2].weight, state["features.18.weight"])
    resnet = torch.load(backbone_files["linknet34"], weights_only=True)
    link = build_model(ModelSpec("linknet34", 1), encoder_weights=backbone_files["linknet34"])
    assert torch.equal(link.stem[0].weight, resnet["conv1.weight"])
    assert torch.equal(link.layer3[2].bn1.running_mean, resnet["layer3.2.bn1.running_mean"])


# skip fusion

def _decoder_input_widths(net, blocks, x):
    widths = {}

    def record(name):
        def hook(module, args):
            widths[name] = args[0].shape[1]

        return hook

    hooks = [getattr(net, name).register_forward_pre_hook(record(name)) for name in blocks]
    with torch.no_grad():
        net.eval()(x)
    for h in hooks:
        h.remove()
    return widths


def test_ternausnet_concatenates_skips():
    net = _nets("ternausnet11")
    widths = _decoder_input_widths(net, ["dec5", "dec4", "dec3", "dec2", "dec1"], torch.rand(1, 3, 64, 64))
    # upsampled width + skip width
    assert widths == {"dec5": 256 + 512, "dec4": 256 + 512, "dec3": 128 + 256, "dec2": 64 + 128, "dec1": 32 + 64}
    up, skip = torch.zeros(1, 256, 4, 4), torch.zeros(1, 512, 4, 4)
    assert net.fuse(up, skip).shape[1] == 768


def test_linknet_adds_skips():
    net = _nets("linknet34")
    widths = _decoder_input_widths(net, ["dec3", "dec2", "dec1"], torch.rand(1, 3, 64, 64))
    assert widths == {"dec3": 256, "dec2": 128, "dec1": 64}
    up, skip = torch.ones(1, 64, 4, 4), torch.zeros(1, 64, 4, 4)
    assert torch.equal(net.fuse(up, skip), up)


# checkpoints

def test_checkpoint_round_trip(tmp_path):
    net = _net("unet", 5, base_width=8).eval()
    path = save_checkpoint(tmp_path / "m.pt", net, {"task": "parts", "epoch": 3})
    restored, meta = load_checkpoint(path, expected_spec=net.spec, task="parts")
    assert meta["epoch"] == 3
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(net(x), restored.eval()(x))


def test_checkpoint_validation(tmp_path):
    net = _net("unet", 1, base_width=8)
    path = save_checkpoint(tmp_path / "m.pt", net, {"task": "binary"})
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_spec=ModelSpec("unet", 5, base_width=8))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, task="parts")
    torch.save({"weights": 1}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.pt")
