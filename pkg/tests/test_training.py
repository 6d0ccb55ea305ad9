import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from drivexai.dataset import DatasetError, DatasetManifest, read_manifest
from drivexai.model import ModelOutput, build_model
from drivexai.synth import generate_dataset
from drivexai.training import (
    Checkpoint,
    ConfigError,
    SweepGrid,
    TrainConfig,
    ablation_sweep,
    evaluate,
    evaluate_model,
    load_images,
    multitask_loss,
    normalize,
    param_groups,
    train,
)

SIZE = (64, 128)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(40, 11, root, size=SIZE)
    return {s: read_manifest(root / f"{s}.jsonl") for s in ("train", "val", "test")}


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=4, lr=0.01, input_size=SIZE, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def fake_output(a_logits, r_logits):
    a, r = torch.as_tensor(a_logits, dtype=torch.float64), torch.as_tensor(r_logits, dtype=torch.float64)
    return ModelOutput(a, r, torch.sigmoid(a), torch.sigmoid(r))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lam=-1)
    with pytest.raises(ConfigError):
        TrainConfig(lam="inf")  # predicted mode has no reason-only protocol
    with pytest.raises(ConfigError):
        TrainConfig(lam="inf", reason_mode="detached")
    with pytest.raises(ConfigError):
        TrainConfig(action_weights=(1, 1, 0, 2))
    TrainConfig(lam="inf", reason_mode="oracle")
    d = TrainConfig().to_json()
    assert d["lr"] == 0.001 and d["momentum"] == 0.9 and d["weight_decay"] == 1e-4 and d["epochs"] == 50
    assert TrainConfig.from_json(json.loads(json.dumps(d))) == TrainConfig()
    with pytest.raises(ConfigError, match="unknown config keys"):
        TrainConfig.from_json({"learning_rate": 1})


def test_loss_hand_example():
    out = fake_output(torch.zeros(1, 4), torch.zeros(1, 21))
    loss, parts = multitask_loss(out, [[1, 0, 0, 0]], torch.zeros(1, 21), TrainConfig(lam=0))
    # each action BCE at logit 0 is ln 2; weights 1+1+2+2, summed over classes, mean over one sample
    assert loss.item() == pytest.approx(math.log(2) * 6, abs=1e-12)
    assert parts["reason"].item() == pytest.approx(math.log(2) * 21, abs=1e-12)


def test_loss_batch_mean_class_sum():
    out = fake_output(torch.zeros(3, 4), torch.zeros(3, 21))
    loss, _ = multitask_loss(out, torch.zeros(3, 4), torch.zeros(3, 21), TrainConfig(lam=1))
    assert loss.item() == pytest.approx(math.log(2) * (6 + 21), abs=1e-12)


def test_loss_perfect_logits():
    a = torch.tensor([[1.0, 0, 1, 0]])
    r = (torch.arange(21) % 3 == 0).double()[None]
    out = fake_output((2 * a - 1) * 60, (2 * r - 1) * 60)
    loss, _ = multitask_loss(out, a, r, TrainConfig())
    assert loss.item() < 1e-20


def test_loss_affine_in_lambda():
    g = torch.Generator().manual_seed(0)
    a_l, r_l = torch.randn(5, 4, generator=g), torch.randn(5, 21, generator=g)
    a, r = (torch.rand(5, 4, generator=g) < 0.5).double(), (torch.rand(5, 21, generator=g) < 0.3).double()
    vals = [multitask_loss(fake_output(a_l, r_l), a, r, TrainConfig(lam=lam))[0].item() for lam in (0, 1, 2)]
    reason = multitask_loss(fake_output(a_l, r_l), a, r, TrainConfig(lam=1))[1]["reason"].item()
    assert vals[1] - vals[0] == pytest.approx(reason, rel=1e-12)
    assert vals[2] - vals[1] == pytest.approx(reason, rel=1e-12)


def test_loss_lambda_zero_ignores_reason_logits():
    r_l = torch.randn(2, 21, dtype=torch.float64, requires_grad=True)
    a_l = torch.randn(2, 4, dtype=torch.float64)
    out = ModelOutput(a_l, r_l, torch.sigmoid(a_l), torch.sigmoid(r_l))
    loss, _ = multitask_loss(out, torch.ones(2, 4), torch.ones(2, 21), TrainConfig(lam=0))
    assert not loss.requires_grad
    h = 1e-6
    bumped = fake_output(a_l, r_l.detach() + h)
    assert multitask_loss(bumped, torch.ones(2, 4), torch.ones(2, 21), TrainConfig(lam=0))[0].item() == loss.item()


def test_loss_gradcheck():
    a = (torch.rand(3, 4) < 0.5).double()
    r = (torch.rand(3, 21) < 0.3).double()

    def fn(al, rl):
        return multitask_loss(ModelOutput(al, rl, torch.sigmoid(al), torch.sigmoid(rl)), a, r, TrainConfig(lam=0.7))[0]

    inputs = (torch.randn(3, 4, dtype=torch.float64, requires_grad=True), torch.randn(3, 21, dtype=torch.float64, requires_grad=True))
    assert torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-8, rtol=1e-4)


def test_param_groups_exempt_biases_and_scalars():
    model = build_model(seed=0)
    cfg = TrainConfig()
    decay, no_decay = param_groups(model, cfg)
    assert decay["weight_decay"] == 1e-4 and no_decay["weight_decay"] == 0.0
    ids = {id(p) for p in no_decay["params"]}
    names = {n for n, p in model.named_parameters() if id(p) in ids}
    assert "blocks.1.channel.alpha" in {n.removeprefix("attention.") for n in names}
    assert all(p.ndim <= 1 for p in no_decay["params"])
    assert all(p.ndim > 1 for p in decay["params"])
    # lambda = 0: the reason head is not optimized at all
    groups = param_groups(model, TrainConfig(lam=0))
    head = {id(p) for p in model.reason_head.parameters()}
    assert not head & {id(p) for g in groups for p in g["params"]}


def test_training_is_deterministic(tiny, tmp_path):
    cfg = small_cfg()
    m8 = DatasetManifest(tiny["train"].records[:8], "train", root=tiny["train"].root)
    h1 = train(m8, None, cfg).history
    h2 = train(m8, None, cfg).history
    assert [r["train_loss"] for r in h1] == [r["train_loss"] for r in h2]


def test_lambda_zero_leaves_reason_head_untouched(tiny):
    cfg = small_cfg(lam=0)
    model = build_model(cfg.model_config(), seed=0)
    before = {k: v.clone() for k, v in model.reason_head.state_dict().items()}
    action_before = model.action_head.fc.weight.detach().clone()
    train(tiny["train"], None, cfg, model=model)
    for k, v in model.reason_head.state_dict().items():
        assert torch.equal(v, before[k])
    assert not torch.equal(model.action_head.fc.weight, action_before)


def test_run_directory_and_checkpoint_round_trip(tiny, tmp_path):
    cfg = small_cfg()
    res = train(tiny["train"], tiny["val"], cfg, tmp_path / "run")
    assert (tmp_path / "run" / "config.json").exists()
    hist = [json.loads(line) for line in (tmp_path / "run" / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in hist] == [1, 2]
    ck = Checkpoint.load(tmp_path / "run" / "checkpoints" / "final.pt")
    assert ck.config == cfg and ck.epoch == 2
    x = normalize(load_images(tiny["val"], SIZE))
    before = res.final.model()(x)
    after = ck.model()(x)
    assert torch.equal(before.action_logits, after.action_logits)
    assert torch.equal(before.reason_logits, after.reason_logits)
    assert int(ck.model().trained_epochs) == 2


def test_evaluate_schema_and_errors(tiny, tmp_path):
    res = train(tiny["train"], None, small_cfg(epochs=1))
    rep = evaluate(tiny["test"], res.final)
    assert len(rep.action_f1) + len(rep.reason_f1) + len(rep.joint_f1) == 4 + 21 + 33
    with pytest.raises(DatasetError, match="empty evaluation set"):
        evaluate(DatasetManifest((), "test"), res.final)
    wrong = replace(tiny["test"], fingerprint="0" * 64)
    with pytest.raises(DatasetError, match="fingerprint"):
        evaluate(wrong, res.final)


def test_missing_image_names_record(tiny, tmp_path):
    rec = replace(tiny["train"].records[0], image_path="images/missing.png")
    m = DatasetManifest((rec,), "train", root=tiny["train"].root)
    with pytest.raises(DatasetError, match=rec.id):
        train(m, None, small_cfg(epochs=1))


def test_overfit_eight_samples(tiny):
    m8 = DatasetManifest(tiny["train"].records[:8], "train", root=tiny["train"].root)
    cfg = small_cfg(epochs=60, batch_size=8, lr=0.05, schedule={"type": "none"})
    res = train(m8, None, cfg)
    rep = evaluate_model(res.final.model(), m8, cfg)
    assert rep.f1_action_overall == 1.0
    assert rep.f1_reason_overall == 1.0
    assert rep.f1_joint_overall == 1.0


def test_oracle_mode_feeds_ground_truth(tiny):
    cfg = small_cfg(epochs=1, lam="inf", reason_mode="oracle")
    res = train(tiny["train"], None, cfg)
    model = res.final.model()
    rep = evaluate_model(model, tiny["test"], cfg)
    assert 0.0 <= rep.f1_reason_overall <= 1.0


def test_sweep_single_cell_and_skips(tiny, tmp_path):
    base = small_cfg(epochs=1).to_json()
    grid = SweepGrid(lambdas=(1,), modes=("predicted",), ratios=(16,), base=base)
    rows = ablation_sweep(grid, tiny["train"], tiny["val"], tiny["test"], tmp_path / "sw")
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    assert rows[0]["attention_params_c512_single_block"] == 33_411
    assert (tmp_path / "sw" / "sweep.csv").read_text().count("\n") == 2

    grid = SweepGrid(lambdas=("inf",), modes=("predicted", "oracle"), ratios=(16,), base=base)
    rows = ablation_sweep(grid, tiny["train"], tiny["val"], tiny["test"], tmp_path / "sw2")
    status = {r["reason_mode"]: r["status"] for r in rows}
    assert status == {"predicted": "skipped", "oracle": "ok"}
