"""Acceptance criteria, one test per criterion, each reporting a PASS/FAIL line.

Criteria 6 and 7 share one seeded training session (module fixture): five
experts pretrained on 200 phantoms each, a curriculum run, a no-curriculum
run and a pooled single-network baseline with a matched parameter count.
"""
import itertools
import math
import time

import numpy as np
import pytest

import mome.tensor as T
from conftest import record
from mome.cli import main
from mome.curriculum import curriculum_loss, f_epoch
from mome.data import PhantomSpec, generate_phantom, make_samples, make_unseen, parse_volume, volume_bytes
from mome.eval import ImageRecord, activation_profile, aggregate_report, evaluate
from mome.loss import dice_ce, deep_supervision_weights, mome_loss, specialisation_loss
from mome.moe import aggregate, mix
from mome.nn import (ExpertNetwork, GatingMaps, GatingNetwork, Modality, MultiResLogits, checkpoint_bytes,
                     parse_checkpoint, network_from_state)
from mome.tensor.gradcheck import check_gradients
from mome.train import TrainConfig, build_mome, matched_baseline, pretrain_expert, train_baseline, train_joint

pytestmark = pytest.mark.acceptance

GRAD_INSTANCES = 10
GRAD_BUDGET_S = 120.0
ORACLE_TOL = 1e-6
IDENTITY_TOL = 1e-6
NONINFERIORITY = -0.01
EXPERIMENT_BUDGET_S = 30 * 60

# desk-scale training protocol for criteria 6 and 7
SEED = 0
N_PER_MODALITY = 200
N_TEST = 20
PRETRAIN = dict(epochs_pretrain=20, iters_per_epoch=50)
JOINT = dict(epochs_joint=20, iters_per_epoch=150, lr_joint=1e-3)
BASELINE_EPOCHS = 20


# ---------------------------------------------------------------- 1

def _rand(rng, *shape, away=False):
    x = rng.standard_normal(shape)
    if away:
        x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12), x)
    return T.Tensor(x, requires_grad=True, dtype=np.float64)


def _proj(fn, shape, rng):
    r = rng.standard_normal(shape)
    return lambda: T.sum(T.mul(fn(), r))


def _softmax_np(z):
    w = np.exp(z - z.max(axis=0))
    return w / w.sum(axis=0)


def _grad_cases():
    """name -> builder(rng) returning (scalar function, inputs)."""

    def conv(rng, stride):
        x, w, b = _rand(rng, 2, 4, 4, 4), _rand(rng, 3, 2, 3, 3, 3), _rand(rng, 3)
        out = (3,) + ((4, 4, 4) if stride == 1 else (2, 2, 2))
        return _proj(lambda: T.conv3d(x, w, b, stride=stride, padding=1), out, rng), [x, w, b]

    def upsample(rng):
        x = _rand(rng, 2, 2, 2, 2)
        return _proj(lambda: T.upsample_nearest(x, 2), (2, 4, 4, 4), rng), [x]

    def norm(rng):
        x = _rand(rng, 2, 3, 3, 3)
        return _proj(lambda: T.instance_norm(x), x.shape, rng), [x]

    def act(rng):
        x = _rand(rng, 2, 3, 3, 3, away=True)
        return _proj(lambda: T.leaky_relu(x, 0.01), x.shape, rng), [x]

    def softmax(rng):
        x = _rand(rng, 4, 2, 2, 2)
        return _proj(lambda: T.softmax(x, axis=0), x.shape, rng), [x]

    def aggregation(rng):
        e = [_rand(rng, 2, 2, 2, 2) for _ in range(3)]
        g = T.Tensor(_softmax_np(rng.standard_normal((3, 2, 2, 2))), requires_grad=True, dtype=np.float64)
        return _proj(lambda: mix(e, g), (2, 2, 2, 2), rng), e + [g]

    def base_loss(rng):
        z = _rand(rng, 2, 3, 3, 3)
        y = rng.integers(0, 2, (3, 3, 3))
        return (lambda: dice_ce(T.softmax(z, axis=0), y)), [z]

    def multires(rng):
        return MultiResLogits([_rand(rng, 2, 4, 4, 4), _rand(rng, 2, 2, 2, 2)])

    def spec_loss(rng):
        e = multires(rng)
        y = rng.integers(0, 2, (4, 4, 4))
        return (lambda: specialisation_loss(e, y, deep_supervision_weights(2))), e.levels

    def mome(rng):
        es = [multires(rng) for _ in range(2)]
        gs = [T.Tensor(_softmax_np(rng.standard_normal((2,) + l.shape[1:])), requires_grad=True, dtype=np.float64)
              for l in es[0].levels]
        y = rng.integers(0, 2, (4, 4, 4))
        k = deep_supervision_weights(2)
        return (lambda: mome_loss(aggregate(es, GatingMaps(gs)), y, k)), [t for e in es for t in e.levels] + gs

    def curriculum(rng):
        es = [multires(rng) for _ in range(2)]
        gs = [T.Tensor(_softmax_np(rng.standard_normal((2,) + l.shape[1:])), requires_grad=True, dtype=np.float64)
              for l in es[0].levels]
        y = rng.integers(0, 2, (4, 4, 4))
        k = deep_supervision_weights(2)
        f = float(rng.uniform(0.05, 0.95))

        def fn():
            spec = [specialisation_loss(es[1], y, k)]
            return curriculum_loss(Modality.T1, spec, mome_loss(aggregate(es, GatingMaps(gs)), y, k), f)
        return fn, [t for e in es for t in e.levels] + gs

    return {
        "conv3d stride 1": lambda rng: conv(rng, 1),
        "conv3d stride 2": lambda rng: conv(rng, 2),
        "upsample": upsample,
        "instance norm": norm,
        "leaky relu": act,
        "softmax": softmax,
        "aggregation": aggregation,
        "dice+ce": base_loss,
        "deep-supervised expert loss": spec_loss,
        "aggregate loss": mome,
        "curriculum loss": curriculum,
    }


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    failures, worst = [], 0.0
    for name, build in _grad_cases().items():
        for seed in range(GRAD_INSTANCES):
            fn, inputs = build(np.random.default_rng(seed))
            res = check_gradients(fn, inputs, eps=1e-3, rtol=1e-3, atol=1e-5)
            worst = max(worst, res.max_rel_error)
            if not res.passed:
                failures.append(f"{name}#{seed}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < GRAD_BUDGET_S
    record(1, ok, "gradient suite", f"{len(_grad_cases())} ops x {GRAD_INSTANCES} instances, "
           f"max rel err {worst:.2e}, {elapsed:.1f}s, failures {failures}")
    assert not failures
    assert elapsed < GRAD_BUDGET_S


# ---------------------------------------------------------------- 2

def _loop_reference(e, g):
    out = []
    for l in range(len(g)):
        c_count, spatial = e[0][l].shape[0], e[0][l].shape[1:]
        o = np.zeros((c_count,) + spatial)
        for c in range(c_count):
            for v in itertools.product(*[range(n) for n in spatial]):
                o[(c,) + v] = sum(e[i][l][(c,) + v] * g[l][(i,) + v] for i in range(len(e)))
        out.append(o)
    return out


def test_criterion_2_aggregation_oracle():
    rng = np.random.default_rng(2)
    worst, exact = 0.0, True
    for trial in range(100):
        n, levels = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        side = int(rng.choice([s for s in (1, 2, 4) if s >= 2 ** (levels - 1)]))
        dims = [tuple(side // 2 ** l for _ in range(3)) for l in range(levels)]
        e = [[rng.standard_normal((2,) + d) for d in dims] for _ in range(n)]
        g = [_softmax_np(rng.standard_normal((n,) + d)) for d in dims]
        wrap = lambda arrs: [T.Tensor(a, dtype=np.float64) for a in arrs]
        got = aggregate([MultiResLogits(wrap(x)) for x in e], GatingMaps(wrap(g)))
        for a, b in zip(got.levels, _loop_reference(e, g)):
            worst = max(worst, float(np.abs(a.data - b).max()))
        j = trial % n
        onehot = [np.eye(n)[j].reshape((n, 1, 1, 1)) * np.ones((n,) + d) for d in dims]
        sel = aggregate([MultiResLogits(wrap(x)) for x in e], GatingMaps(wrap(onehot)))
        exact &= all(np.array_equal(a.data, e[j][l]) for l, a in enumerate(sel.levels))
    ok = worst <= ORACLE_TOL and exact
    record(2, ok, "aggregation oracle", f"100 instances, max abs err {worst:.1e}, one-hot exact {exact}")
    assert worst <= ORACLE_TOL
    assert exact


# ---------------------------------------------------------------- 3

def test_criterion_3_schedule_exactness():
    bad = []
    for total in (1, 10, 800):
        for t in (0, total / 4, total / 2, 3 * total / 4, total):
            if f_epoch(t, total) != (1 - t / total) ** 2:
                bad.append((t, total))
    monotone = all(all(f_epoch(t, T_) >= f_epoch(t + 1, T_) for t in range(T_)) for T_ in (1, 10, 800))
    ok = not bad and monotone
    record(3, ok, "schedule exactness", f"mismatches {bad}, monotone {monotone}")
    assert not bad and monotone


# ---------------------------------------------------------------- 4

def test_criterion_4_gating_normalisation():
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(100):
        gate = GatingNetwork(5, expert_width=2, base=2, levels=3, seed=trial,
                             hierarchical=bool(trial % 2 == 0))
        scale = float(rng.uniform(0.1, 3.0))
        for p in gate.parameters():
            p.data = (rng.standard_normal(p.shape) * scale).astype(np.float32)
        x = rng.standard_normal((8, 8, 8)) * rng.uniform(0.1, 10)
        feats = [T.Tensor(rng.standard_normal((2, 8, 8, 8))) for _ in range(5)]
        for m in gate(x, feats).levels:
            assert np.all(m.data >= 0)
            worst = max(worst, float(np.abs(m.data.astype(np.float64).sum(axis=0) - 1).max()))
    ok = worst <= 1e-6
    record(4, ok, "gating normalisation", f"100 parameterisations, max |sum-1| {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_loss_identities():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 2, (4, 4, 4))
    experts = [MultiResLogits([T.Tensor(rng.standard_normal((2,) + (4 // 2 ** l,) * 3), dtype=np.float64)
                               for l in range(3)]) for _ in range(5)]
    errs = {}
    full = float(dice_ce(T.softmax(experts[0].levels[0], axis=0), y).data)
    errs["k=[1,0,0] expert"] = abs(float(specialisation_loss(experts[0], y, [1, 0, 0]).data) - full)
    gates = GatingMaps([T.Tensor(_softmax_np(rng.standard_normal((5,) + l.shape[1:])), dtype=np.float64)
                        for l in experts[0].levels])
    agg = aggregate(experts, gates)
    full_agg = float(dice_ce(T.softmax(agg.levels[0], axis=0), y).data)
    errs["k=[1,0,0] aggregate"] = abs(float(mome_loss(agg, y, [1, 0, 0]).data) - full_agg)
    k = deep_supervision_weights(3)
    spec = [specialisation_loss(e, y, k) for e in experts]
    lm = mome_loss(agg, y, k)
    errs["f=1"] = abs(float(curriculum_loss(Modality.FLAIR, spec, lm, 1.0).data) - float(spec[3].data))
    errs["f=0"] = abs(float(curriculum_loss(Modality.FLAIR, spec, lm, 0.0).data) - float(lm.data))
    for j in range(5):
        onehot = GatingMaps([T.Tensor(np.eye(5)[j].reshape(5, 1, 1, 1) * np.ones((5,) + l.shape[1:]),
                                      dtype=np.float64) for l in experts[0].levels])
        errs[f"one-hot {j}"] = abs(float(mome_loss(aggregate(experts, onehot), y, k).data) - float(spec[j].data))
    worst = max(errs.values())
    ok = worst <= IDENTITY_TOL
    record(5, ok, "loss identities", f"max deviation {worst:.1e}")
    assert ok, errs


# ---------------------------------------------------------------- 6 and 7

@pytest.fixture(scope="module")
def experiment():
    t0 = time.perf_counter()
    spec = PhantomSpec(seed=SEED)
    train = {m: make_samples(spec, m, N_PER_MODALITY, seed=SEED) for m in Modality}
    test = [s for m in Modality for s in make_samples(spec, m, N_TEST, seed=SEED, start=N_PER_MODALITY)]
    unseen = make_unseen(spec, N_TEST, seed=SEED)
    pooled = [s for m in Modality for s in train[m]]
    cfg = TrainConfig(seed=SEED, **PRETRAIN, **{k: v for k, v in JOINT.items() if k != "iters_per_epoch"})
    states = []
    for m in Modality:
        e = ExpertNetwork(m, cfg.base, cfg.levels, seed=SEED * 100 + int(m))
        pretrain_expert(e, train[m], cfg)
        states.append(e.state_dict())
    runs = {}
    for name, schedule in (("curriculum", "quadratic"), ("no-curriculum", "off")):
        jcfg = TrainConfig(seed=SEED, schedule=schedule, **JOINT)
        experts = [ExpertNetwork(m, cfg.base, cfg.levels) for m in Modality]
        for e, s in zip(experts, states):
            e.load_state_dict(s)
        model = build_mome(jcfg, experts)
        train_joint(model, pooled, jcfg)
        runs[name] = model
    experiment_time = time.perf_counter() - t0

    mome_params = runs["curriculum"].num_parameters()
    baseline = matched_baseline(mome_params, seed=SEED)
    # as many optimisation steps as the joint phase
    bcfg = TrainConfig(seed=SEED, epochs_baseline=BASELINE_EPOCHS, iters_per_epoch=JOINT["iters_per_epoch"])
    train_baseline(baseline, pooled, bcfg)
    return dict(runs=runs, test=test, unseen=unseen, baseline=baseline, mome_params=mome_params,
                experiment_time=experiment_time)


def test_criterion_6_anti_degeneration(experiment):
    cur = activation_profile(experiment["runs"]["curriculum"], experiment["test"])
    off = activation_profile(experiment["runs"]["no-curriculum"], experiment["test"])
    for name, prof in (("curriculum", cur), ("no-curriculum", off)):
        print(f"\n{name} activation profile (level 1)\n{prof.table()}", end="")
    row_max = cur.matching_is_row_max()
    inactive = cur.inactive_experts()
    h_cur, h_off = float(cur.entropy.mean()), float(off.entropy.mean())
    elapsed = experiment["experiment_time"]
    checks = {
        "matching expert is row max": all(row_max.values()),
        "no inactive expert": not inactive,
        "entropy curriculum <= no-curriculum": h_cur <= h_off,
        "runtime": elapsed < EXPERIMENT_BUDGET_S,
    }
    detail = (f"row max {[m.label for m, v in row_max.items() if v]}, inactive {inactive}, "
              f"entropy {h_cur:.3f} vs {h_off:.3f}, no-curriculum inactive {off.inactive_experts()}, "
              f"{elapsed / 60:.1f} min")
    record(6, all(checks.values()), "anti-degeneration", detail)
    assert all(checks.values()), checks


def test_criterion_7_mome_vs_baseline(experiment):
    model = experiment["runs"]["curriculum"]
    base = experiment["baseline"]
    m_unseen = evaluate(model, experiment["unseen"]).image_level
    b_unseen = evaluate(base, experiment["unseen"]).image_level
    m_seen = evaluate(model, experiment["test"]).image_level
    b_seen = evaluate(base, experiment["test"]).image_level
    margin = m_unseen - b_unseen
    detail = (f"unseen MoME {m_unseen:.4f} vs baseline {b_unseen:.4f}, margin {margin:+.4f}; "
              f"seen {m_seen:.4f} vs {b_seen:.4f}; params {experiment['mome_params']} vs {base.num_parameters()}")
    record(7, margin >= NONINFERIORITY, "MoME vs matched pooled baseline", detail)
    assert abs(base.num_parameters() - experiment["mome_params"]) / experiment["mome_params"] < 0.05
    assert margin >= NONINFERIORITY


# ---------------------------------------------------------------- 8

QUICKSTART_CFG = """\
seed = 7
n_train = 3
n_test = 1
n_unseen = 1
dims = 8,8,8
lesion_count = 1,1
lesion_radius = 1,2
epochs_pretrain = 2
epochs_joint = 2
iters_per_epoch = 3
base = 2
gate_base = 2
"""


def _quickstart(root):
    root.mkdir()
    (root / "run.cfg").write_text(QUICKSTART_CFG)
    cfg = str(root / "run.cfg")
    assert main(["gen-data", "--spec", cfg, "--out", str(root / "data")]) == 0
    manifest = str(root / "data" / "manifest.tsv")
    ckpts = []
    for m in Modality:
        out = str(root / "experts" / f"{m.label}.ckpt")
        assert main(["pretrain-expert", "--modality", m.label, "--data", manifest, "--out", out, "--config", cfg]) == 0
        ckpts.append(out)
    assert main(["train", "--experts", *ckpts, "--data", manifest, "--out", str(root / "model"), "--config", cfg]) == 0
    return sorted(p for p in root.rglob("*.ckpt"))


def test_criterion_8_determinism_and_round_trips(tmp_path):
    a = _quickstart(tmp_path / "a")
    b = _quickstart(tmp_path / "b")
    same = [p.relative_to(tmp_path / "a") for p in a] == [p.relative_to(tmp_path / "b") for p in b] and \
        all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))

    vol = generate_phantom(PhantomSpec(), Modality.DWI, seed=8).volume
    back = parse_volume(volume_bytes(vol.data, vol.modality, (0.5, 1.0, 2.0)))
    vol_ok = np.array_equal(back.data, vol.data) and back.modality == vol.modality and back.spacing == (0.5, 1.0, 2.0)

    ckpt_ok = True
    for net in (ExpertNetwork(Modality.T2, seed=3), GatingNetwork(seed=4)):
        buf = checkpoint_bytes(net)
        kind, mod, state = parse_checkpoint(buf)
        again = network_from_state(kind, mod, state)
        ckpt_ok &= checkpoint_bytes(again) == buf
    ok = same and vol_ok and ckpt_ok
    record(8, ok, "determinism and round-trips",
           f"{len(a)} checkpoints byte-identical {same}, volume {vol_ok}, checkpoint {ckpt_ok}")
    assert same and vol_ok and ckpt_ok


# ---------------------------------------------------------------- 9

def test_criterion_9_evaluation_arithmetic():
    rng = np.random.default_rng(9)
    layout = {("dA", "t1"): 1, ("dA", "t2"): 7, ("dB", "t3"): 3, ("dB", "t4"): 12, ("dC", "t5"): 2}
    recs = []
    for (ds, task), n in layout.items():
        recs += [ImageRecord(float(v), ds, task, f"{task}-{i}") for i, v in enumerate(rng.uniform(0, 1, n))]
    rep = aggregate_report(recs)

    by_task, by_ds = {}, {}
    for r in recs:
        by_task.setdefault(r.task_id, []).append(r.dice)
        by_ds.setdefault(r.dataset_id, []).append(r.dice)
    image = math.fsum(r.dice for r in recs) / len(recs)
    task = math.fsum(math.fsum(v) / len(v) for v in by_task.values()) / len(by_task)
    dataset = math.fsum(math.fsum(v) / len(v) for v in by_ds.values()) / len(by_ds)

    # duplicating every image of one task must not move the task-level mean
    dup = recs + [ImageRecord(r.dice, r.dataset_id, r.task_id, r.image_id + "'") for r in recs if r.task_id == "t4"]
    errs = [abs(rep.image_level - image), abs(rep.task_level - task), abs(rep.dataset_level - dataset),
            abs(aggregate_report(dup).task_level - rep.task_level)]
    ok = max(errs) <= 1e-12 and abs(task - image) > 1e-3
    record(9, ok, "evaluation arithmetic", f"max deviation {max(errs):.1e}, image {image:.4f} task {task:.4f} "
           f"dataset {dataset:.4f}")
    assert ok
