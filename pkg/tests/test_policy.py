import numpy as np
import pytest

from crowdnav import tensorcore as tc
from crowdnav.policy import HUMAN_DIM, ROBOT_DIM, PolicyConfig, PolicyNetwork, featurize


def tiny_config(stages="rh_hh_oh", n_max=4, heads=2):
    return PolicyConfig(
        d_hh=8,
        d_oh=8,
        d_rh=8,
        heads_hh=heads,
        gru_hidden=12,
        conv_channels=(2, 3),
        conv_kernel=3,
        conv_stride=2,
        n_max_humans=n_max,
        num_beams=24,
        stages=stages,
    )


def random_inputs(rng, cfg, batch=2, n_visible=None):
    n = cfg.n_max_humans
    robot = rng.normal(size=(batch, ROBOT_DIM))
    humans = np.zeros((batch, n, HUMAN_DIM))
    mask = np.zeros((batch, n))
    for b in range(batch):
        k = rng.integers(1, n + 1) if n_visible is None else n_visible
        humans[b, :k] = rng.normal(size=(k, HUMAN_DIM))
        mask[b, :k] = 1.0
    scan = rng.uniform(0.1, 1.0, size=(batch, cfg.num_beams))
    return robot, humans, mask, scan


def test_forward_shapes_and_determinism():
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=1, dtype=np.float64)
    rng = np.random.default_rng(0)
    robot, humans, mask, scan = random_inputs(rng, cfg, batch=3)
    hidden = net.zero_hidden(3)
    out1 = net.forward(robot, humans, mask, scan, hidden)
    out2 = net.forward(robot, humans, mask, scan, hidden)
    assert out1.value.shape == (3, 1)
    assert out1.action_logits.shape == (3, 9)
    assert out1.new_hidden.shape == (3, 12)
    assert np.array_equal(out1.value.data, out2.value.data)
    assert np.array_equal(out1.action_logits.data, out2.action_logits.data)


def test_single_visible_human_attends_to_itself():
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=2, dtype=np.float64)
    rng = np.random.default_rng(1)
    robot, humans, mask, scan = random_inputs(rng, cfg, batch=1, n_visible=1)
    out = net.forward(robot, humans, mask, scan, net.zero_hidden(1))
    hh = out.attention["hh"]  # (B, heads, n, n)
    assert hh[0, :, 0, 0] == pytest.approx(np.ones(cfg.heads_hh))
    assert out.attention["rh"][0, 0] == pytest.approx(1.0)
    # the row equals its value projection passed through the output mix
    v = humans[0, :1] @ net.params["hh/w_v"].data
    expected = v @ net.params["hh/w_o"].data
    # forward uses the same params; check v_hh row via an independent matmul
    v_hh, _ = net.hh_attention(tc.Tensor(humans[:1].astype(np.float64)), mask[:1])
    np.testing.assert_allclose(v_hh.data[0, 0], expected[0], atol=1e-12)


def test_oh_uniform_weights_scale_to_identity():
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=3, dtype=np.float64)
    rng = np.random.default_rng(2)
    batch = 1
    humans = rng.normal(size=(batch, cfg.n_max_humans, cfg.d_hh))
    mask = np.array([[1.0, 1.0, 0.0, 0.0]])
    # force equal logits by a zero obstacle key
    zero_embed = tc.Tensor(np.zeros((batch, cfg.d_oh)))
    out, weights = net.oh_attention(tc.Tensor(humans), zero_embed, mask, mask.sum(-1))
    np.testing.assert_allclose(weights[0, :2], [0.5, 0.5], atol=1e-12)
    expected = humans[0, :2] @ net.params["oh/w_v"].data  # n_vis * 0.5 == 1
    np.testing.assert_allclose(out.data[0, :2], expected, atol=1e-12)
    assert np.all(out.data[0, 2:] == 0.0)


def test_rh_weights_sum_to_one_and_masked_zero():
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=4, dtype=np.float64)
    rng = np.random.default_rng(3)
    robot, humans, mask, scan = random_inputs(rng, cfg, batch=4)
    out = net.forward(robot, humans, mask, scan, net.zero_hidden(4))
    rh = out.attention["rh"]
    for b in range(4):
        visible = mask[b] > 0
        assert rh[b][~visible] == pytest.approx(0.0, abs=0.0)
        assert rh[b][visible].sum() == pytest.approx(1.0, abs=1e-6)


def test_mask_invariance_to_garbage_in_masked_slots():
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=5, dtype=np.float32)
    rng = np.random.default_rng(4)
    robot, humans, mask, scan = random_inputs(rng, cfg, batch=2, n_visible=2)
    base = net.forward(robot, humans, mask, scan, net.zero_hidden(2))
    poisoned = humans.copy()
    poisoned[:, 2:] = rng.normal(size=poisoned[:, 2:].shape) * 50.0
    out = net.forward(robot, poisoned, mask, scan, net.zero_hidden(2))
    np.testing.assert_allclose(out.value.data, base.value.data, atol=1e-6)
    np.testing.assert_allclose(out.action_logits.data, base.action_logits.data, atol=1e-6)


def test_permutation_invariance_of_value_and_logits():
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=6, dtype=np.float64)
    rng = np.random.default_rng(5)
    robot, humans, mask, scan = random_inputs(rng, cfg, batch=1, n_visible=3)
    base = net.forward(robot, humans, mask, scan, net.zero_hidden(1))
    perm = humans.copy()
    perm[0, [0, 1, 2]] = humans[0, [2, 0, 1]]
    out = net.forward(robot, perm, mask, scan, net.zero_hidden(1))
    np.testing.assert_allclose(out.value.data, base.value.data, atol=1e-5)
    np.testing.assert_allclose(out.action_logits.data, base.action_logits.data, atol=1e-5)


def test_hh_permutation_equivariance():
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=7, dtype=np.float64)
    rng = np.random.default_rng(6)
    humans = rng.normal(size=(1, cfg.n_max_humans, HUMAN_DIM))
    mask = np.ones((1, cfg.n_max_humans))
    base, _ = net.hh_attention(tc.Tensor(humans), mask)
    order = np.array([2, 0, 3, 1])
    permuted, _ = net.hh_attention(tc.Tensor(humans[:, order]), mask)
    np.testing.assert_allclose(permuted.data[0], base.data[0][order], atol=1e-9)


def test_deletion_equivalence_of_masking():
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=8, dtype=np.float64)
    rng = np.random.default_rng(7)
    humans = rng.normal(size=(1, cfg.n_max_humans, HUMAN_DIM))
    mask_full = np.array([[1.0, 1.0, 1.0, 0.0]])
    # mask human 1 versus zeroing it out entirely
    mask_dropped = np.array([[1.0, 0.0, 1.0, 0.0]])
    deleted = humans.copy()
    deleted[0, 1] = 0.0
    a, _ = net.hh_attention(tc.Tensor(humans), mask_dropped)
    b, _ = net.hh_attention(tc.Tensor(deleted), mask_dropped)
    np.testing.assert_allclose(a.data[0, [0, 2]], b.data[0, [0, 2]], atol=1e-9)


def test_zero_visible_humans_flag_path():
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=9, dtype=np.float64)
    rng = np.random.default_rng(8)
    robot = rng.normal(size=(1, ROBOT_DIM))
    humans = np.zeros((1, cfg.n_max_humans, HUMAN_DIM))
    mask = np.zeros((1, cfg.n_max_humans))
    scan = rng.uniform(0.2, 1.0, size=(1, cfg.num_beams))
    out = net.forward(robot, humans, mask, scan, net.zero_hidden(1))
    assert np.all(np.isfinite(out.value.data))
    assert np.all(np.isfinite(out.action_logits.data))
    assert np.all(out.attention["rh"] == 0.0)


def test_obstacle_embed_shape_and_determinism():
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=10, dtype=np.float64)
    scan = np.full((2, cfg.num_beams), 1.0)
    a = net.obstacle_embed(tc.Tensor(scan))
    b = net.obstacle_embed(tc.Tensor(scan))
    assert a.shape == (2, cfg.d_oh)
    assert np.array_equal(a.data, b.data)
    with pytest.raises(ValueError):
        net.obstacle_embed(tc.Tensor(np.ones((1, cfg.num_beams + 1))))


def test_parameter_count_independent_of_n_max():
    counts = {
        n: PolicyNetwork(tiny_config(n_max=n), seed=0).parameter_count() for n in (2, 6, 12)
    }
    assert counts[2] == counts[6] == counts[12]


def test_ablation_parameter_counts_ascending():
    counts = [
        PolicyNetwork(tiny_config(stages=s), seed=0).parameter_count()
        for s in ("rh", "rh_oh", "rh_hh_oh")
    ]
    assert counts[0] < counts[1] < counts[2]


def test_ablation_forward_runs():
    rng = np.random.default_rng(11)
    for stages in ("rh", "rh_oh"):
        cfg = tiny_config(stages=stages)
        net = PolicyNetwork(cfg, seed=12, dtype=np.float64)
        robot, humans, mask, scan = random_inputs(rng, cfg, batch=2)
        out = net.forward(robot, humans, mask, scan, net.zero_hidden(2))
        assert np.all(np.isfinite(out.action_logits.data))
        assert ("oh" in out.attention) == (stages == "rh_oh")


def randomize_params(net, rng, scale=0.4):
    """Move every parameter (biases included) to a generic point so finite
    differences never straddle a relu/clip kink that sits exactly at zero."""
    for _, t in net.params.items():
        t.data = rng.uniform(-scale, scale, size=t.data.shape).astype(t.data.dtype)


def finite_diff(f, t, h=1e-5):
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


@pytest.mark.parametrize("stages", ["rh", "rh_oh", "rh_hh_oh"])
def test_full_forward_gradients_match_finite_differences(stages):
    cfg = tiny_config(stages=stages, n_max=3)
    net = PolicyNetwork(cfg, seed=13, dtype=np.float64)
    rng = np.random.default_rng(9)
    randomize_params(net, rng)
    robot, humans, mask, scan = random_inputs(rng, cfg, batch=2)
    hidden = rng.normal(size=(2, cfg.gru_hidden)) * 0.3
    coeff_v = rng.normal(size=(2, 1))
    coeff_l = rng.normal(size=(2, 9))

    def loss_fn():
        out = net.forward(robot, humans, mask, scan, hidden)
        return tc.add(
            tc.sum_(tc.mul(out.value, coeff_v)), tc.sum_(tc.mul(out.action_logits, coeff_l))
        )

    loss = loss_fn()
    net.params.zero_grad()
    tc.backward(loss)
    for name, t in net.params.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = finite_diff(lambda: loss_fn().item(), t)
        assert max_rel_err(analytic, numeric) <= 1e-4, name


def test_no_grad_skips_tape():
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=14)
    rng = np.random.default_rng(10)
    robot, humans, mask, scan = random_inputs(rng, cfg, batch=1)
    with tc.no_grad():
        out = net.forward(robot, humans, mask, scan, net.zero_hidden(1))
    assert out.value._parents == ()
    assert not out.value.requires_grad


def test_checkpoint_roundtrip_restores_outputs(tmp_path):
    cfg = tiny_config()
    net = PolicyNetwork(cfg, seed=15)
    rng = np.random.default_rng(11)
    robot, humans, mask, scan = random_inputs(rng, cfg, batch=1)
    base = net.forward(robot, humans, mask, scan, net.zero_hidden(1))
    path = tmp_path / "policy.ckpt"
    net.save(path, {"note": "test"})
    loaded, meta = PolicyNetwork.load(path)
    assert meta["note"] == "test"
    assert loaded.config == cfg
    out = loaded.forward(robot, humans, mask, scan, loaded.zero_hidden(1))
    assert np.array_equal(out.value.data, base.value.data)
    assert np.array_equal(out.action_logits.data, base.action_logits.data)


def test_featurize_normalizes_and_keeps_masked_zero():
    from crowdnav.env import CrowdNavEnv, EnvConfig

    env = CrowdNavEnv(EnvConfig())
    obs = env.reset(3)
    robot, humans, mask, scan = featurize(obs, env.config.arena_half_width, env.config.scan.max_range)
    assert robot.shape == (ROBOT_DIM,)
    assert np.all(np.abs(robot[[0, 1, 4, 5]]) <= 1.0 + 1e-9)
    assert np.all(scan <= 1.0 + 1e-12) and np.all(scan > 0)
    assert np.all(humans[mask == 0] == 0.0)
