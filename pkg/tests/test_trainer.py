import colorsys

import numpy as np
import pytest
from scipy import ndimage

from pathdiff import diffusion as dif
from pathdiff import tensor as T
from pathdiff.checkpoint import decode_tensors
from pathdiff.data import SceneConfig, desk_buckets, gen_dataset, gen_scene
from pathdiff.errors import ConfigError, ContractError, FormatError
from pathdiff.model import ModelConfig, assemble_model
from pathdiff.rng import SAMPLE, make_rng
from pathdiff.text import DEFAULT_VOCAB
from pathdiff.train import (AdamW, SamplerConfig, TrainConfig, build_configs, compute_losses, load_checkpoint,
                            make_optimizer, make_schedule, parse_config_text, sample, save_checkpoint, train,
                            train_step, warmup_lr)
from pathdiff.verify import tiny_config


def small_model(**kw):
    cfg = tiny_config(**kw)
    return assemble_model(cfg, 0), cfg


SMALL_SCENES = SceneConfig(n_shapes=1, bucket=3, divisor=80, n_y=6)  # 8 x 8 images


# ---------------------------------------------------------------- assembly


def test_minimal_model_runs_on_two_channel_image(rng):
    cfg = ModelConfig(blocks=1, space_experts=1, time_experts=1, channels=2, d=8, d_y=8, n_y=4, patch=2,
                      expert_hidden=8, gate_hidden=8, d_t=8, edge_channels=2, max_grid=4, T=50, T_c=25)
    model = assemble_model(cfg, 0)
    cap = DEFAULT_VOCAB.encode(["red"], 4)
    out = model(rng.standard_normal((2, 8, 8)), cap, 10)
    assert out.shape == (2, 8, 8)
    assert model.num_parameters() > 0


def test_doubling_blocks_doubles_block_parameters():
    a = assemble_model(ModelConfig(blocks=2), 0).block_parameter_count()
    b = assemble_model(ModelConfig(blocks=4), 0).block_parameter_count()
    assert b == 2 * a


def test_output_shape_for_every_desk_bucket(rng):
    model = assemble_model(ModelConfig(blocks=1), 0)
    cap = DEFAULT_VOCAB.encode(["blue", "square"], 16)
    for h, w in desk_buckets():
        x = rng.standard_normal((3, h, w))
        with T.no_grad():
            assert model(x, cap, 100).shape == (3, h, w)


def test_init_is_deterministic():
    a = dict(assemble_model(tiny_config(), 3).named_parameters())
    b = dict(assemble_model(tiny_config(), 3).named_parameters())
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_config_problems_reported_together():
    with pytest.raises(ConfigError) as exc:
        ModelConfig(d=0, heads=3, T_c=2000).validate()
    assert len(exc.value.problems) >= 2
    with pytest.raises(ConfigError) as exc:
        build_configs({"bogus": "1", "steps": "x", "lr": "-1"})
    assert len(exc.value.problems) == 3


def test_config_file_parsing():
    raw = parse_config_text("# desk\nblocks = 2\nlr=0.001  # faster\n\nsteps = 7\n")
    mcfg, tcfg = build_configs(raw)
    assert mcfg.blocks == 2 and tcfg.lr == 0.001 and tcfg.steps == 7
    with pytest.raises(ConfigError):
        parse_config_text("blocks 2")


def test_image_not_divisible_by_patch(rng):
    model, _ = small_model()
    with pytest.raises(ConfigError):
        model(rng.standard_normal((3, 7, 8)), [0, 18, 18, 18, 18, 18], 1)


# ---------------------------------------------------------------- losses and steps


def test_combined_loss_is_sum(rng):
    model, cfg = small_model()
    sched = dif.build_schedule(cfg.T)
    s = gen_scene(2, SMALL_SCENES)
    caption = s.caption
    eps = rng.standard_normal(s.image.shape)
    L, den, edge, _ = compute_losses(model, s.image, s.edge_map, caption, 100, eps, sched)
    assert L.item() == pytest.approx(den.item() + edge.item(), abs=1e-15)
    assert edge.item() > 0
    _, _, late, _ = compute_losses(model, s.image, s.edge_map, caption, cfg.T_c + 1, eps, sched)
    assert late.item() == 0.0
    T.active_tape().clear()


def _run(steps, seed=0, lr=1e-3):
    model, cfg = small_model()
    tcfg = TrainConfig(steps=steps, batch_size=2, lr=lr, warmup=2, seed=seed)
    opt = make_optimizer(model, tcfg)
    hist = train(model, gen_dataset(6, 1, SMALL_SCENES), dif.build_schedule(cfg.T), opt, tcfg, SMALL_SCENES)
    return model, opt, hist


def test_training_is_bit_reproducible():
    _, _, a = _run(3)
    _, _, b = _run(3)
    assert [(m["L"], m["L_edge"]) for m in a] == [(m["L"], m["L_edge"]) for m in b]


def test_zero_lr_leaves_parameters(rng):
    model, cfg = small_model()
    before = {k: p.data.copy() for k, p in model.named_parameters()}
    opt = AdamW(model.named_parameters(), lr=0.0)
    batch = [gen_scene(i, SMALL_SCENES) for i in range(2)]
    train_step(model, batch, dif.build_schedule(cfg.T), opt, rng)
    assert all(np.array_equal(before[k], p.data) for k, p in model.named_parameters())


def test_mixed_bucket_batch_rejected(rng):
    model, cfg = small_model()
    a = gen_scene(0, SceneConfig(bucket=0))
    b = gen_scene(1, SceneConfig(bucket=3))
    with pytest.raises(ContractError):
        train_step(model, [a, b], dif.build_schedule(cfg.T), AdamW(model.named_parameters()), rng)
    with pytest.raises(ContractError):
        train_step(model, [], dif.build_schedule(cfg.T), AdamW(model.named_parameters()), rng)


def test_edge_loss_zero_whenever_t_above_threshold():
    _, _, hist = _run(6)
    items = [it for m in hist for it in m["items"]]
    assert any(t > 500 for t, _, _ in items) and any(t <= 500 for t, _, _ in items)
    for t, _, l_edge in items:
        assert (l_edge == 0.0) == (t > 500)


# ---------------------------------------------------------------- optimizer


def test_adamw_without_decay_matches_hand_adam(rng):
    p = T.Tensor(rng.standard_normal(4), requires_grad=True)
    g1, g2 = rng.standard_normal(4), rng.standard_normal(4)
    opt = AdamW([("p", p)], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
    x = p.data.copy()
    m = v = np.zeros(4)
    for s, g in enumerate((g1, g2), start=1):
        p.grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9**s)) / (np.sqrt(v / (1 - 0.999**s)) + 1e-8)
        assert np.allclose(p.data, x, rtol=0, atol=1e-15)


def test_weight_decay_is_decoupled():
    p = T.Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.zeros(1)
    AdamW([("p", p)], lr=0.1, weight_decay=0.5).step()
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_warmup_is_linear_then_constant():
    assert [warmup_lr(1e-4, s, 4) for s in (1, 2, 3, 4, 5, 100)] == [
        1e-4 * 1 / 4, 1e-4 * 2 / 4, 1e-4 * 3 / 4, 1e-4, 1e-4, 1e-4]
    assert warmup_lr(0.5, 1, 0) == 0.5


def test_optimizer_reports_warmup_lr():
    _, _, hist = _run(3)
    assert [m["lr"] for m in hist] == [5e-4, 1e-3, 1e-3]


# ---------------------------------------------------------------- sampling


def test_sample_is_deterministic_and_in_range():
    model, cfg = small_model()
    cap = [0, 1, 6, 18, 18, 18]
    scfg = SamplerConfig(steps=4, seed=3)
    a = sample(model, cap, scfg, (3, 8, 8))
    b = sample(model, cap, scfg, (3, 8, 8))
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_guidance_one_is_pure_conditional():
    model, cfg = small_model()
    cap = [0, 1, 6, 18, 18, 18]
    calls = []
    a = sample(model, cap, SamplerConfig(steps=3, guidance=1.0), (3, 8, 8), recorder=lambda t, r: calls.append(t))
    assert len(calls) == 3
    sched = make_schedule(cfg)
    x_T = make_rng(0, SAMPLE).standard_normal((3, 8, 8))
    with T.no_grad():
        ref = dif.ddim_sample(lambda x, t: dif.clip_eps(x, t, model(x, cap, t).data, sched), x_T, sched, 3)
    assert np.array_equal(a, np.clip((ref + 1) / 2, 0, 1))


def test_sampler_config_errors():
    with pytest.raises(ConfigError):
        SamplerConfig(sampler="euler").validate(1000)
    with pytest.raises(ConfigError):
        SamplerConfig(steps=0).validate(1000)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    model, opt, _ = _run(2)
    p1, p2 = tmp_path / "a.pdc", tmp_path / "b.pdc"
    save_checkpoint(model, opt, p1)
    m2, o2 = load_checkpoint(p1)
    save_checkpoint(m2, o2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert o2.step_count == 2
    x = rng.standard_normal((3, 8, 8))
    cap = [0, 2, 7, 18, 18, 18]
    with T.no_grad():
        assert np.array_equal(model(x, cap, 40).data, m2(x, cap, 40).data)


def test_truncated_checkpoint_rejected(tmp_path):
    model, opt, _ = _run(1)
    path = tmp_path / "c.pdc"
    save_checkpoint(model, opt, path)
    buf = path.read_bytes()
    path.write_bytes(buf[: len(buf) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + buf[8:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    assert "param.head.weight" in decode_tensors(buf)


def test_resume_matches_continuous_training(tmp_path):
    full_model, _, full_hist = _run(4)
    model, opt, first = _run(2)
    path = tmp_path / "mid.pdc"
    save_checkpoint(model, opt, path)
    model, opt = load_checkpoint(path)
    _, cfg = small_model()
    tcfg = TrainConfig(steps=2, batch_size=2, lr=1e-3, warmup=2)
    rest = train(model, gen_dataset(6, 1, SMALL_SCENES), dif.build_schedule(cfg.T), opt, tcfg, SMALL_SCENES,
                 start_step=opt.step_count)
    assert [m["step"] for m in rest] == [3, 4]
    assert [m["L"] for m in first + rest] == [m["L"] for m in full_hist]
    for (k, p), (_, q) in zip(full_model.named_parameters(), model.named_parameters()):
        assert np.array_equal(p.data, q.data), k


# ---------------------------------------------------------------- desk model


def largest_bright_hue(img, level=0.5):
    """Hue in degrees of the mean colour of the largest connected bright region."""
    bright = img.max(axis=0) > level
    lab, n = ndimage.label(bright)
    if n == 0:
        return None
    sizes = ndimage.sum(bright, lab, range(1, n + 1))
    rgb = img[:, lab == np.argmax(sizes) + 1].mean(axis=1)
    return colorsys.rgb_to_hsv(*rgb)[0] * 360


def test_largest_bright_hue_helper():
    img = np.zeros((3, 10, 10))
    img[0, 1:6, 1:6] = 0.9
    img[2, 8:, 8:] = 0.9
    assert largest_bright_hue(img) == 0.0
    assert largest_bright_hue(np.zeros((3, 4, 4))) is None


@pytest.mark.slow
def test_desk_model_draws_red_for_red_circle(desk_run):
    model, sched = desk_run["model"], desk_run["sched"]
    cap = DEFAULT_VOCAB.encode(["red", "circle"], model.cfg.n_y)
    hues = [largest_bright_hue(sample(model, cap, SamplerConfig(steps=50, guidance=3.0, seed=s), (3, 40, 40),
                                      sched)) for s in range(4)]
    in_band = [h is not None and min(h, 360 - h) <= 30 for h in hues]
    assert sum(in_band) >= 3, hues
