import json

import numpy as np
import pytest
import torch

from drivexai.labels import decide
from drivexai.model import (
    ActionHead,
    DecisionAwareNet,
    ModelConfig,
    ReasonHead,
    Trunk,
    TrunkConfig,
    build_model,
)


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig.from_profile("desk"), seed=0).eval()


def test_trunk_shape_and_zero_input():
    torch.manual_seed(0)
    trunk = Trunk(64, TrunkConfig(hidden=64)).eval()
    assert trunk(torch.randn(2, 64, 8, 16)).shape == (2, 64)
    h = trunk(torch.zeros(3, 64, 8, 16))
    assert torch.equal(h[0], h[1]) and torch.equal(h[1], h[2])
    with pytest.raises(ValueError):
        TrunkConfig(hidden=0)


def test_trunk_spike_position_invariance():
    torch.manual_seed(0)
    trunk = Trunk(4, TrunkConfig(hidden=6)).double().eval()
    a = torch.zeros(1, 4, 9, 12, dtype=torch.float64)
    b = torch.zeros_like(a)
    a[0, 2, 3, 4] = 2.5
    b[0, 2, 6, 9] = 2.5
    assert torch.allclose(trunk(a), trunk(b), atol=1e-12, rtol=0)


def test_action_head():
    torch.manual_seed(0)
    head = ActionHead(16)
    assert torch.equal(head(torch.zeros(1, 16))[0], head.fc.bias)
    assert head(torch.randn(2, 16)).shape == (2, 4)
    h1, h2 = torch.randn(2, 16, dtype=torch.float64), torch.randn(2, 16, dtype=torch.float64)
    head.double()
    a, b = 0.3, -1.7
    lhs = head(a * h1 + b * h2)
    rhs = a * head(h1) + b * head(h2) - (a + b - 1) * head.fc.bias
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_reason_head_decision_awareness():
    torch.manual_seed(0)
    head = ReasonHead(16)
    h = torch.randn(1, 16).repeat(2, 1)
    probs = torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    out = head(h, probs)
    assert out.shape == (2, 21)
    assert not torch.allclose(out[0], out[1])
    with torch.no_grad():
        head.action_columns.zero_()
    out = head(h, probs)
    assert torch.equal(out[0], out[1])
    with pytest.raises(ValueError):
        head(h, torch.zeros(2, 3))


def test_forward_contract(model):
    x = torch.randn(3, 3, 64, 128)
    out = model(x)
    assert out.action_logits.shape == (3, 4) and out.reason_logits.shape == (3, 21)
    assert torch.equal(out.action_probs, torch.sigmoid(out.action_logits))
    assert torch.equal(out.reason_probs, torch.sigmoid(out.reason_logits))
    assert np.array_equal(out.action_decisions, decide(out.action_probs.detach().numpy(), 0.5))
    assert len(out.explanation_defined()) == 3


def test_identical_images_identical_rows(model):
    x = torch.randn(1, 3, 64, 128).repeat(2, 1, 1, 1)
    out = model(x)
    for t in (out.action_logits, out.reason_logits):
        assert torch.equal(t[0], t[1])


def test_batch_invariance(model):
    x = torch.randn(4, 3, 64, 128)
    batched = model(x).reason_logits
    single = torch.cat([model(x[i : i + 1]).reason_logits for i in range(4)])
    assert torch.allclose(batched, single, atol=1e-6, rtol=0)


def test_reason_input_modes(model):
    x = torch.randn(2, 3, 64, 128)
    bits = torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    with pytest.raises(ValueError):
        model(x, reason_mode="oracle")
    with pytest.raises(ValueError):
        model(x, reason_mode="psychic")
    out = model(x, reason_mode="oracle", reason_input=bits)
    h = model.features(x)
    assert torch.allclose(out.reason_logits, model.reason_head(h, bits), atol=1e-6)


def test_detached_mode_blocks_reason_gradient_into_action_head():
    torch.manual_seed(0)
    net = build_model(seed=0).eval()
    x = torch.randn(2, 3, 32, 64)
    for mode, expect_zero in (("detached", True), ("predicted", False)):
        net.zero_grad()
        net(x, reason_mode=mode).reason_logits.sum().backward()
        g = net.action_head.fc.weight.grad
        assert (g is None or not g.any()) == expect_zero


def test_model_config_json_round_trip():
    cfg = ModelConfig.from_profile("desk", reduction=8)
    back = ModelConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back == cfg
    paper = ModelConfig.from_profile("paper")
    assert paper.trunk.hidden == 256 and paper.attention.channels == 512


def test_full_pipeline_finite_differences():
    torch.manual_seed(0)
    net = build_model(seed=0).double().eval()
    x = torch.randn(1, 3, 32, 64, dtype=torch.float64)
    ya = torch.tensor([[1.0, 0, 1, 0]], dtype=torch.float64)
    yr = (torch.rand(1, 21) < 0.3).double()

    def loss():
        out = net(x)
        bce = torch.nn.functional.binary_cross_entropy_with_logits
        return bce(out.action_logits, ya, reduction="sum") + bce(out.reason_logits, yr, reduction="sum")

    picks = [
        (net.backbone.stem[0].weight, (3, 1, 1, 2)),
        (net.maspp.project.weight, (5, 17, 0, 0)),
        (net.attention.blocks[1].channel.mlp.fc1.weight, (1, 9)),
        (net.trunk.conv[0].weight, (7, 3, 1, 1)),
        (net.action_head.fc.weight, (2, 11)),
        (net.reason_head.fc.weight, (4, 66)),
    ]
    net.zero_grad()
    loss().backward()
    eps = 1e-6
    for p, idx in picks:
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss().item()
            p[idx] = orig - eps
            down = loss().item()
            p[idx] = orig
        numeric = (up - down) / (2 * eps)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-6) + 1e-9


def test_heads_gradcheck():
    torch.manual_seed(0)
    trunk, ah, rh = Trunk(8, TrunkConfig(hidden=6)).double().eval(), ActionHead(6).double(), ReasonHead(6).double()

    def fn(f):
        h = trunk(f)
        a = ah(h)
        return torch.cat([a, rh(h, torch.sigmoid(a))], 1)

    f = torch.randn(1, 8, 4, 5, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(fn, (f,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_trained_epochs_buffer_and_gradcam_layer():
    net = DecisionAwareNet()
    assert int(net.trained_epochs) == 0
    assert net.gradcam_layer is net.trunk.conv
