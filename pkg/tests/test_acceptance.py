"""End-to-end acceptance checks, one test per criterion.

Each test appends a one-line verdict that the terminal summary prints as
``criterion N: PASS/FAIL``. The training-based criteria run the shipped
configs at full budget and take a while on a single core.
"""

from dataclasses import replace
from pathlib import Path
from statistics import median

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from rfs.diffcore import Mlp, max_relative_error, numeric_grad
from rfs.flowpolicy import DemoSet, FMConfig, IntegrationSchedule, VelocityField, denoise, fm_loss, train_fm
from rfs.harness.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from rfs.harness.cli import main
from rfs.harness.config import ExperimentConfig, load_config
from rfs.harness.pipeline import collect, fit_field, make_demos, run_offline, schedule_for
from rfs.harness.repro import run_repro
from rfs.modulation import ModulationPolicy
from rfs.rl_offline import CriticPair, actor_loss, critic_loss, residual_mse
from rfs.rl_online import PPOConfig, policy_loss, value_loss
from rfs.rl_offline import TD3BCConfig
from rfs.rollout import evaluate_policy

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = (0, 1, 2)


def verdict(num: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((num, bool(ok), detail))
    assert ok, f"criterion {num}: {detail}"


def _tanh64(net: Mlp) -> Mlp:
    net = net.astype(np.float64)
    net.activations = ["tanh"] * (len(net.activations) - 1) + ["identity"]
    return net


# ------------------------------------------------------------ criterion 1


def test_criterion_1_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    errors = {}

    field = VelocityField(2, 4, hidden=(16, 16), action_scale=0.15, rng=rng)
    field.net = _tanh64(field.net)
    s, a = rng.standard_normal((8, 4)), rng.standard_normal((8, 2)) * 0.1
    a0, t = rng.standard_normal((8, 2)), rng.uniform(0, 1, 8)
    _, g = fm_loss(field, s, a, a0=a0, t=t)
    errors["fm_loss"] = max_relative_error(g, numeric_grad(lambda: fm_loss(field, s, a, a0=a0, t=t)[0],
                                                           field.net.params()))

    pol = ModulationPolicy("rfs", 4, 2, hidden=(16, 16), residual_bound=0.02, rng=rng)
    pol.net = _tanh64(pol.net)
    pol.net.weights[-1] *= 50
    pol.log_std_a0 = pol.log_std_a0.astype(np.float64)
    pol.log_std_ar = pol.log_std_ar.astype(np.float64)
    obs = rng.standard_normal((10, 4))
    mu0, mur = pol.means(obs)
    u0, ur = mu0 + 0.3 * rng.standard_normal((10, 2)), mur + 0.5 * rng.standard_normal((10, 2))
    adv = rng.standard_normal(10)
    logp_old = pol.gaussian_logp(obs, u0, ur) + rng.choice([-0.4, 0.0, 0.4], 10) + rng.uniform(-0.02, 0.02, 10)
    _, g, _ = policy_loss(pol, obs, u0, ur, logp_old, adv, 0.2, 0.01)
    errors["ppo_policy"] = max_relative_error(g, numeric_grad(
        lambda: policy_loss(pol, obs, u0, ur, logp_old, adv, 0.2, 0.01)[0], pol.params()))

    vnet = _tanh64(Mlp([4, 16, 16, 1], rng=rng))
    ret = rng.standard_normal(10)
    _, g = value_loss(vnet, obs, ret, 0.5)
    errors["ppo_value"] = max_relative_error(g, numeric_grad(lambda: value_loss(vnet, obs, ret, 0.5)[0],
                                                             vnet.params()))

    for variant in ("residual", "concat", "executed"):
        critics = CriticPair(variant, 4, 2, hidden=(16, 16), rng=rng)
        critics.q1, critics.q2 = _tanh64(critics.q1), _tanh64(critics.q2)
        cond = rng.standard_normal((10, 4 if variant == "concat" else 2))
        y = rng.standard_normal(10)
        _, g1, g2 = critic_loss(critics, obs, cond, y)
        errors[f"critic_{variant}"] = max_relative_error(g1 + g2, numeric_grad(
            lambda: critic_loss(critics, obs, cond, y)[0], critics.q1.params() + critics.q2.params()))
        a_r = rng.uniform(-0.02, 0.02, (10, 2))
        sched = IntegrationSchedule.uniform(4)
        _, g, _ = actor_loss(pol, critics, field, sched, obs, a_r, 0.2, 0.15)
        num = numeric_grad(lambda: actor_loss(pol, critics, field, sched, obs, a_r, 0.2, 0.15)[0],
                           pol.net.params())
        if variant == "residual":  # the latent head sees no critic signal here
            d = pol.flat_dim
            g = [g[-4][d:], g[-3][d:]]
            num = [num[-2][d:], num[-1][d:]]
        else:
            g = g[:-2]
        errors[f"actor_{variant}"] = max_relative_error(g, num)

    worst = max(errors, key=errors.get)
    verdict(1, errors[worst] < 1e-4, f"max relative error {errors[worst]:.2e} ({worst}) over {len(errors)} losses")


# ------------------------------------------------------------ criterion 2


def test_criterion_2_euler_is_exact_on_straight_paths():
    a0 = np.array([0.25, -1.25])
    target = np.array([0.5, 0.25])
    net = Mlp([2 + 1 + 3, 4, 2], dtype=np.float64)
    for w, b in zip(net.weights, net.biases):
        w[...] = 0.0
        b[...] = 0.0
    net.biases[-1][...] = target - a0
    field = VelocityField(2, 3, net=net)
    worst = max(float(np.max(np.abs(denoise(field, np.zeros(3), a0, IntegrationSchedule.uniform(K)) - target)))
                for K in (1, 4, 8, 32))
    verdict(2, worst < 1e-6, f"max |a - target| = {worst:.1e} over K in 1, 4, 8, 32")


# ------------------------------------------------------------ criterion 3


def test_criterion_3_two_modes_survive():
    n = 2000
    states = np.zeros((n, 1))
    actions = np.where(np.arange(n) % 2 == 0, -1.0, 1.0)[:, None]
    field = VelocityField(1, 1, hidden=(64, 64), rng=np.random.default_rng(0))
    train_fm(field, DemoSet(states, actions), FMConfig(lr=1e-3, steps=3000), rng=np.random.default_rng(10))
    a0 = np.random.default_rng(20).standard_normal((1000, 1))
    a = denoise(field, np.zeros((1000, 1)), a0, IntegrationSchedule.uniform(8))[:, 0]
    near_neg, near_pos = np.mean(np.abs(a + 1) < 0.25), np.mean(np.abs(a - 1) < 0.25)
    stray = 1.0 - near_neg - near_pos
    verdict(3, near_neg >= 0.3 and near_pos >= 0.3 and stray <= 0.1,
            f"mass near -1 {near_neg:.3f}, near +1 {near_pos:.3f}, stray {stray:.3f}")


# ------------------------------------------------------- criteria 4 and 5


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    """The shipped repro config: every method on every task for three seeds."""
    cfg = load_config(CONFIGS / "repro.yaml")
    assert cfg.seeds == SEEDS
    result = run_repro(cfg, tmp_path_factory.mktemp("repro"))
    print("\n" + result.markdown())
    assert result.complete, result.errors
    return result


def test_criterion_4_modulation_starts_neutral(grid):
    gaps = []
    for (env, method), by_seed in grid.initial.items():
        for seed, init in by_seed.items():
            gaps.append((abs(init - grid.base[env][seed]), env, method, seed))
    worst = max(gaps)
    verdict(4, worst[0] <= 0.05, f"largest |initial - base| = {worst[0]:.3f} ({worst[1]}, {worst[2]}, seed {worst[3]}) "
                                 f"over {len(gaps)} runs")


def test_criterion_5_geometric_separation(grid):
    def med(env, method):
        return median(grid.cells[(env, method)].values())

    base_mr = median(grid.base["ModalReach"].values())
    checks = {
        "OR residual >= 0.7": med("OffsetReach", "residual") >= 0.7,
        "OR dsrl <= 0.1": med("OffsetReach", "dsrl") <= 0.1,
        "MR dsrl >= 0.8": med("ModalReach", "dsrl") >= 0.8,
        "MR residual <= base + 0.1": med("ModalReach", "residual") <= base_mr + 0.1,
        "MOR rfs >= 0.8": med("ModalOffsetReach", "rfs") >= 0.8,
        "MOR rfs > ablations + 0.15": med("ModalOffsetReach", "rfs") > max(
            med("ModalOffsetReach", "dsrl"), med("ModalOffsetReach", "residual")) + 0.15,
    }
    numbers = ", ".join(f"{e[:1] if e != 'ModalOffsetReach' else 'MO'}/{m} {med(e, m):.2f}"
                        for e in ("OffsetReach", "ModalReach", "ModalOffsetReach") for m in ("rfs", "dsrl", "residual"))
    failed = [k for k, ok in checks.items() if not ok]
    verdict(5, not failed, f"medians {numbers}; MR base {base_mr:.2f}" + (f"; failed: {failed}" if failed else ""))


# ------------------------------------------------------- criteria 6 and 7


@pytest.fixture(scope="module")
def offset_bases():
    """Per seed: the OffsetReach config, its trained base and a 50-episode corrected dataset."""
    out = {}
    for seed in SEEDS:
        cfg = load_config(CONFIGS / "offset_reach.yaml").with_overrides(seed=seed)
        field, _ = fit_field(cfg, make_demos(cfg, seed), seed)
        out[seed] = (cfg, field, collect(cfg, field, seed))
    return out


def test_criterion_6_executed_action_critic_wins(offset_bases):
    scores = {v: [] for v in ("executed", "residual", "concat")}
    for seed, (cfg, field, ds) in offset_bases.items():
        for variant in scores:
            res = run_offline(cfg.with_overrides(critic=variant), ds, field, seed)
            scores[variant].append(res.final_success)
    med = {v: median(s) for v, s in scores.items()}
    ok = med["executed"] >= med["residual"] + 0.2 and med["executed"] >= med["concat"] + 0.2
    detail = ", ".join(f"{v} {med[v]:.2f} {scores[v]}" for v in scores)
    verdict(6, ok, f"median final success {detail}")


BC_LIMIT_UPDATES = 30000


def test_criterion_7_bc_limit(offset_bases):
    cfg, field, ds = offset_bases[0]
    train, held = ds.split(0.2, np.random.default_rng(0))
    cfg = replace(cfg, td3bc=replace(cfg.td3bc, bc_weight=1000.0, total_updates=BC_LIMIT_UPDATES, eval_every=5000))
    res = run_offline(cfg, train, field, 0)
    mse = residual_mse(res.policy, held)
    success = evaluate_policy(cfg.env, res.policy, field, schedule_for(cfg), cfg.eval_episodes, 0, tag="final",
                              deterministic=True).success_rate
    target = ds.header["corrected_success"]
    verdict(7, mse < 1e-2 and abs(success - target) <= 0.1,
            f"held-out residual MSE {mse:.4f} (bound units), success {success:.3f} vs dataset {target:.3f}")


# ------------------------------------------------------------ criterion 8


def test_criterion_8_default_hyperparameters():
    expected_ppo = dict(gamma=0.99, gae_lambda=0.95, policy_lr=3e-4, value_lr=1e-3, clip_eps=0.2, value_coef=0.5,
                        max_grad_norm=1.0, minibatch_size=1024)
    expected_td3 = dict(actor_lr=3e-4, critic_lr=3e-4, policy_delay=10, target_noise_std=0.2, target_noise_clip=0.5,
                        bc_weight=0.2, batch_size=512)
    sources = {"PPOConfig()": (PPOConfig().to_dict(), TD3BCConfig().to_dict())}
    for name in ("offset_reach", "modal_reach", "modal_offset_reach", "repro"):
        d = load_config(CONFIGS / f"{name}.yaml").to_dict()
        sources[f"{name}.yaml"] = (d["ppo"], d["td3bc"])
    d = ExperimentConfig().to_dict()
    sources["ExperimentConfig()"] = (d["ppo"], d["td3bc"])
    wrong = []
    for src, (ppo, td3) in sources.items():
        wrong += [f"{src}:ppo.{k}={ppo[k]}" for k, v in expected_ppo.items() if ppo[k] != v]
        wrong += [f"{src}:td3bc.{k}={td3[k]}" for k, v in expected_td3.items() if td3[k] != v]
        if ppo["hidden"] != [256, 128, 64]:
            wrong.append(f"{src}:ppo.hidden")
    verdict(8, not wrong, f"{len(sources)} config sources checked" + (f"; mismatches {wrong}" if wrong else ""))


# ------------------------------------------------------------ criterion 9


def test_criterion_9_determinism_and_persistence(tmp_path, capsys):
    import json

    runs = []
    for _ in range(2):
        assert main(["repro", "--config", str(CONFIGS / "repro_smoke.yaml"), "--output-dir", str(tmp_path)]) == 0
        runs.append(Path(json.loads(capsys.readouterr().out)["run_dir"]))
    same = {name: (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
            for name in ("metrics.csv", "summary.json", "table.md")}

    rng = np.random.default_rng(0)
    field = VelocityField(2, 7, hidden=(32, 32), action_scale=0.15, rng=rng)
    models = [field, ModulationPolicy("rfs", 7, 2, hidden=(16,), rng=rng), Mlp([7, 16, 1], rng=rng),
              CriticPair("executed", 7, 2, hidden=(16,), rng=rng)]
    exact = []
    for i, m in enumerate(models):
        save_checkpoint(tmp_path / f"{i}.rfsw", m)
        exact.append(checkpoint_bytes(load_checkpoint(tmp_path / f"{i}.rfsw")) == checkpoint_bytes(m))
    probes = rng.standard_normal((100, 7)), rng.standard_normal((100, 2))
    sched = IntegrationSchedule.uniform(8)
    back = load_checkpoint(tmp_path / "0.rfsw")
    exact.append(np.array_equal(denoise(back, *probes, sched), denoise(field, *probes, sched)))
    verdict(9, all(same.values()) and all(exact),
            f"repro files identical {same}; checkpoint round trips exact {sum(exact)}/{len(exact)}")
