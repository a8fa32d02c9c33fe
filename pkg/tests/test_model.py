import numpy as np
import pytest
import torch

from resdiff import diffusion as D
from resdiff.data import training_pairs
from resdiff.model import (
    Denoiser,
    DenoiserConfig,
    TrainConfig,
    backward,
    batch_loss,
    denoiser_fn,
    init_denoiser,
    load_checkpoint,
    parameter_count,
    restore_optimizer,
    save_checkpoint,
    time_embedding,
    train,
)
from resdiff.schedule import ScheduleConfig, build_schedule
from resdiff.synth import generate_synthetic

MINI = DenoiserConfig(
    in_channels=3, out_channels=2, base_width=4, num_levels=2,
    blocks_per_level=2, time_embed_dim=16, attention_at_bottleneck=True,
)


@pytest.fixture(scope="module")
def sched():
    return build_schedule(ScheduleConfig())


@pytest.fixture(scope="module")
def mini_net():
    return init_denoiser(MINI, seed=0)


def test_time_embedding_shape():
    emb = time_embedding(torch.tensor([1, 7, 15]), 16)
    assert emb.shape == (3, 16)
    odd = time_embedding(torch.tensor([2]), 9)
    assert odd.shape == (1, 9)


@pytest.mark.parametrize("h,w", [(8, 8), (8, 16), (24, 8)])
def test_forward_shape_contract(mini_net, h, w):
    x = torch.randn(2, 2, h, w)
    y = torch.randn(2, 1, h, w)
    out = mini_net(x, y, torch.tensor([1, 15]))
    assert out.shape == (2, 2, h, w)


def test_forward_is_pure(mini_net):
    x = torch.randn(1, 2, 8, 8)
    y = torch.randn(1, 1, 8, 8)
    t = torch.tensor([5])
    assert torch.equal(mini_net(x, y, t), mini_net(x, y, t))


def test_forward_depends_on_t(mini_net):
    x = torch.randn(1, 2, 8, 8)
    y = torch.randn(1, 1, 8, 8)
    a = mini_net(x, y, torch.tensor([3]))
    b = mini_net(x, y, torch.tensor([4]))
    assert (a - b).pow(2).sum().item() > 0


def test_forward_validates_inputs(mini_net):
    with pytest.raises(ValueError):
        mini_net(torch.randn(1, 2, 8, 8), torch.randn(1, 2, 8, 8), torch.tensor([1]))
    with pytest.raises(ValueError):
        mini_net(torch.randn(1, 2, 9, 9), torch.randn(1, 1, 9, 9), torch.tensor([1]))


def test_config_validation():
    with pytest.raises(ValueError):
        Denoiser(DenoiserConfig(in_channels=2, out_channels=7))
    with pytest.raises(ValueError):
        Denoiser(DenoiserConfig(num_levels=0))


def test_parameter_count_golden():
    # pure function of the config
    assert parameter_count(DenoiserConfig()) == 2_839_719
    assert parameter_count(MINI) == sum(p.numel() for p in init_denoiser(MINI, 3).parameters())


def test_gradient_matches_finite_differences(sched):
    torch.manual_seed(1)
    net = Denoiser(MINI).double()
    x_t = torch.randn(2, 2, 8, 8, dtype=torch.float64)
    y = torch.randn(2, 1, 8, 8, dtype=torch.float64)
    t = torch.tensor([3, 12])
    x0 = torch.randn(2, 2, 8, 8, dtype=torch.float64)

    grads = backward(net, (x_t, y, t, x0), sched)
    params = dict(net.named_parameters())
    r = np.random.default_rng(0)
    checked, ok = 0, 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            for idx in r.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                orig = flat[idx].item()
                h = 1e-5 * max(1.0, abs(orig))
                flat[idx] = orig + h
                lp = batch_loss(net, x_t, y, t, x0, sched).item()
                flat[idx] = orig - h
                lm = batch_loss(net, x_t, y, t, x0, sched).item()
                flat[idx] = orig
                fd = (lp - lm) / (2 * h)
                an = grads[name].view(-1)[idx].item()
                scale = max(abs(fd), abs(an))
                checked += 1
                if scale < 1e-10 or abs(fd - an) / scale <= 1e-3:
                    ok += 1
    assert checked >= 60
    assert ok / checked >= 0.99


def test_backward_zero_grads_for_frozen_params(sched):
    net = init_denoiser(MINI, 0)
    frozen = [n for n, _ in net.named_parameters() if n.startswith("enc.0")]
    for n, p in net.named_parameters():
        if n in frozen:
            p.requires_grad_(False)
    batch = (
        torch.randn(1, 2, 8, 8), torch.randn(1, 1, 8, 8),
        torch.tensor([5]), torch.randn(1, 2, 8, 8),
    )
    grads = backward(net, batch, sched)
    for n in frozen:
        assert torch.equal(grads[n], torch.zeros_like(grads[n]))
    live = [n for n in grads if n not in frozen]
    assert any(grads[n].abs().sum() > 0 for n in live)


def test_backward_rejects_nonfinite_loss(sched):
    net = init_denoiser(MINI, 0)
    batch = (
        torch.full((1, 2, 8, 8), torch.nan), torch.randn(1, 1, 8, 8),
        torch.tensor([5]), torch.randn(1, 2, 8, 8),
    )
    with pytest.raises(RuntimeError, match="non-finite"):
        backward(net, batch, sched)


def test_batch_loss_matches_diffusion_training_loss(sched):
    torch.manual_seed(2)
    net = init_denoiser(MINI, 2)
    x_t = torch.randn(1, 2, 8, 8)
    y = torch.randn(1, 1, 8, 8)
    x0 = torch.randn(1, 2, 8, 8)
    for weighting in (False, True):
        got = batch_loss(net, x_t, y, torch.tensor([4]), x0, sched, weighting=weighting).item()
        with torch.no_grad():
            f_out = net(x_t, y, torch.tensor([4]))[0].numpy().astype(np.float64)
        want = D.training_loss(f_out, x0[0].numpy().astype(np.float64), sched, 4, weighting=weighting)
        assert got == pytest.approx(want, rel=1e-5)


def test_denoiser_fn_adapter(mini_net):
    fn = denoiser_fn(mini_net)
    out = fn(np.zeros((2, 8, 8)), np.zeros((1, 8, 8)), 3)
    assert out.shape == (2, 8, 8) and out.dtype == np.float64


# --- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path, sched):
    net = init_denoiser(MINI, 5)
    path = tmp_path / "m.rdck"
    save_checkpoint(path, net, sched.config)
    net2, sched_cfg, header, _ = load_checkpoint(path)
    assert sched_cfg == sched.config
    assert header["param_count"] == parameter_count(MINI)
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), net2.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.rdck"
    p.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_detects_architecture_mismatch(tmp_path):
    net = init_denoiser(MINI, 0)
    path = tmp_path / "m.rdck"
    save_checkpoint(path, net)
    # tamper: claim a wider model than the stored tensors
    import json, struct

    raw = path.read_bytes()
    hlen = struct.unpack("<HI", raw[4:10])[1]
    header = json.loads(raw[10 : 10 + hlen])
    header["config"]["base_width"] = 8
    blob = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(raw[:4] + struct.pack("<HI", 1, len(blob)) + blob + raw[10 + hlen :])
    with pytest.raises((ValueError, RuntimeError)):
        load_checkpoint(path)


# --- training --------------------------------------------------------------------


def _tiny_pairs():
    recs = generate_synthetic(4, size=32, seed=3)
    return training_pairs(recs)


TINY_MODEL = DenoiserConfig(in_channels=8, out_channels=7, base_width=8,
                            num_levels=2, time_embed_dim=32)


def test_train_same_seed_identical(sched):
    pairs = _tiny_pairs()
    cfg = TrainConfig(batch_size=2, max_steps=12, seed=7, checkpoint_every=0)
    net1, log1 = train(pairs, cfg, sched, model_cfg=TINY_MODEL)
    net2, log2 = train(pairs, cfg, sched, model_cfg=TINY_MODEL)
    assert log1 == log2
    for p1, p2 in zip(net1.parameters(), net2.parameters()):
        assert torch.equal(p1, p2)


def test_train_resume_bit_exact(tmp_path, sched):
    pairs = _tiny_pairs()
    full = TrainConfig(batch_size=2, max_steps=10, seed=1, checkpoint_every=5)
    net_full, log_full = train(pairs, full, sched, model_cfg=TINY_MODEL, out_dir=str(tmp_path))
    resumed, log_tail = train(
        pairs, full, sched, model_cfg=TINY_MODEL,
        resume=str(tmp_path / "ckpt_step000005.rdck"),
    )
    assert log_tail == log_full[5:]
    for p1, p2 in zip(net_full.parameters(), resumed.parameters()):
        assert torch.equal(p1, p2)


def test_train_rejects_empty_dataset(sched):
    with pytest.raises(ValueError):
        train([], TrainConfig(max_steps=1), sched)


def test_restore_optimizer_state(tmp_path, sched):
    pairs = _tiny_pairs()
    cfg = TrainConfig(batch_size=2, max_steps=4, seed=3, checkpoint_every=4)
    train(pairs, cfg, sched, model_cfg=TINY_MODEL, out_dir=str(tmp_path))
    net, _, header, raw = load_checkpoint(tmp_path / "ckpt_step000004.rdck")
    opt = restore_optimizer(net, raw, lr=1e-4)
    state = opt.state[next(net.parameters())]
    assert int(state["step"].item()) == 4
    assert state["exp_avg"].abs().sum() > 0


@pytest.mark.slow
def test_overfit_four_samples(sched):
    # 4 records, 2000 steps: loss must drop at least 10x from its step-50
    # moving average
    pairs = _tiny_pairs()
    cfg = TrainConfig(batch_size=2, max_steps=2000, seed=0, checkpoint_every=0)
    net, log = train(pairs, cfg, sched, model_cfg=TINY_MODEL)
    losses = [l for _, l in log]
    early = float(np.mean(losses[:50]))
    late = float(np.mean(losses[-50:]))
    assert late <= early / 10.0
    for p in net.parameters():
        assert torch.isfinite(p).all()
