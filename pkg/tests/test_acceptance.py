"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import dataclasses
import time
from fractions import Fraction

import numpy as np
import pytest

from mvpseg import numgrad as ng
from mvpseg.encoders import EncoderConfig, attn_pool, build_encoders, dense_project
from mvpseg.evalio import Confusion, SynthConfig, gen_synthetic, hiou, mask_unseen, miou, report
from mvpseg.evalio.formats import save_prompts
from mvpseg.maskhead import LossWeights, fuse, gpr_pooled
from mvpseg.prompts import ClassVocab, class_vectors, init_prompt_bank, max_abs_cos, ocloss
from mvpseg.trainer import LOG_FIELDS, TrainConfig, batch_loss, desk_config, evaluate, sgd_step, train_prompts, warmup_lr
from mvpseg.transfer import agreement, student_infer
from oracles import central_diff, iou_by_sets

SEEDS = (0, 1, 2)
HELD_OUT = 1000


def test_gradient_correctness(criterion):
    rng = np.random.default_rng(0)
    H = W = 6
    C, D, k, T = 5, 16, 3, 4
    enc = build_encoders(EncoderConfig(D=D, seed=0))
    words = [rng.normal(size=(int(rng.integers(1, 3)), D)) for _ in range(C)]
    vocab = ClassVocab([f"class{c}" for c in range(C)], words, [True] * C)
    bank = init_prompt_bank(k, T, D, seed=0, std=0.5)
    bank.tau1.assign(np.array(1.7))
    bank.tau2.assign(np.array(0.8))
    F = rng.normal(size=(H, W, D))
    F /= np.linalg.norm(F, axis=-1, keepdims=True)
    labels = rng.integers(0, C, size=(H, W))
    cfg = TrainConfig(k=k, weights=LossWeights(), use_gpr=True, use_ocloss=True, warmup_iters=0, total_iters=0)

    t0 = time.perf_counter()
    loss, _ = batch_loss(bank, vocab, enc, [F], [labels], cfg)
    ng.backward(loss)
    worst, bad = 0.0, 0
    for p in bank.parameters():
        base = p.value.copy()

        def f(v, p=p):
            p.assign(v)
            return batch_loss(bank, vocab, enc, [F], [labels], cfg)[0].item()

        numeric = central_diff(f, base, h=1e-5)
        p.assign(base)
        a = np.asarray(p.grad)
        diff = np.abs(a - numeric)
        bound = np.maximum(1e-4 * np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        bad += int(np.sum(diff > bound))
        worst = max(worst, float(np.max(diff / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-4))))
    elapsed = time.perf_counter() - t0
    n = bank.prompts.value.size + 2
    criterion(1, "gradient correctness", bad == 0 and elapsed < 10.0,
              f"{n} entries, {bad} outside tolerance, worst rel {worst:.2e}, {elapsed:.1f}s")


def test_ocloss_efficacy(criterion):
    bank = init_prompt_bank(3, 8, 32, seed=0)
    start = max_abs_cos(bank)
    for _ in range(500):
        ng.backward(ocloss(bank))
        sgd_step(bank.parameters(), 1e-2, 0.0, bank.lower_bounds())
    end = max_abs_cos(bank)
    criterion(2, "OCLoss efficacy", end < 0.05, f"max |cos| {start:.4f} -> {end:.4f} after 500 steps")


@pytest.fixture(scope="module")
def ablation():
    """Unseen mIoU / hIoU per seed for k=1, k=3+OC, and k=3+OC without GPR."""
    enc = build_encoders(EncoderConfig(D=32, seed=0))
    runs = {"k1": (1, False, True), "k3oc": (3, True, True), "k3oc_nogpr": (3, True, False)}
    out = {name: [] for name in runs}
    secs = {name: 0.0 for name in runs}
    for seed in SEEDS:
        cfg = SynthConfig(seed=seed)
        train, vocab = gen_synthetic(cfg, enc)
        test, _ = gen_synthetic(dataclasses.replace(cfg, scene_seed=HELD_OUT), enc)
        for name, (k, use_oc, use_gpr) in runs.items():
            t0 = time.perf_counter()
            bank = init_prompt_bank(k, 8, 32, seed=seed)
            tcfg = desk_config(k=k, use_ocloss=use_oc, use_gpr=use_gpr, seed=seed)
            trained, _ = train_prompts(mask_unseen(train, vocab), bank, vocab, enc, tcfg)
            rep = report(evaluate(trained, vocab, enc, test, use_gpr=use_gpr), vocab.seen_ids, vocab.unseen_ids)
            secs[name] += time.perf_counter() - t0
            out[name].append(rep)
    return out, secs


def test_multi_view_trend(ablation, criterion):
    out, secs = ablation
    k1 = 100 * np.mean([r["miou_unseen"] for r in out["k1"]])
    k3 = 100 * np.mean([r["miou_unseen"] for r in out["k3oc"]])
    elapsed = secs["k1"] + secs["k3oc"]
    criterion(3, "multi-view trend", k3 - k1 >= 2.0 and elapsed < 300,
              f"unseen mIoU k=1 {k1:.2f}, k=3+OC {k3:.2f}, gain {k3 - k1:+.2f} points, {elapsed:.0f}s")


def test_gpr_trend(ablation, criterion):
    out, secs = ablation
    on = 100 * np.mean([r["hiou"] for r in out["k3oc"]])
    off = 100 * np.mean([r["hiou"] for r in out["k3oc_nogpr"]])
    elapsed = secs["k3oc"] + secs["k3oc_nogpr"]
    criterion(4, "GPR trend", on >= off and elapsed < 300,
              f"hIoU with GPR {on:.4f}, without {off:.4f}, diff {on - off:+.2e}, {elapsed:.0f}s")


def test_hiou_oracle(criterion):
    v = hiou(52.9, 53.4)
    xs = np.random.default_rng(5).uniform(0, 100, size=100)
    exact = sum(hiou(x, x) == x for x in xs)
    criterion(5, "hIoU oracle", abs(v - 53.1) <= 0.05 and exact == 100,
              f"hiou(52.9, 53.4) = {v:.4f}; hiou(x, x) == x for {exact}/100")


def test_miou_oracle(criterion):
    rng = np.random.default_rng(6)
    matches = 0
    for _ in range(20):
        gt, pred = rng.integers(0, 4, size=(8, 8)), rng.integers(0, 4, size=(8, 8))
        ious = [v for v in (iou_by_sets(gt, pred, c) for c in range(4)) if v is not None]
        matches += miou(Confusion(4).add(gt, pred), range(4)) == sum(ious) / len(ious)
    criterion(6, "mIoU oracle", matches == 20, f"{matches}/20 pairs equal to the set oracle")


def test_warmup_schedule(criterion):
    cfg = TrainConfig()

    def exact(it):
        lr, ratio = Fraction("2e-4"), Fraction("1e-3")
        return float(lr * (ratio + (1 - ratio) * Fraction(it, 1000))) if it < 1000 else float(lr)

    points = {0: 2e-7, 500: exact(500), 1000: 2e-4, 5000: 2e-4}
    got = {it: warmup_lr(it, cfg.lr, cfg.warmup_iters, cfg.warmup_ratio) for it in points}
    err = max(abs(got[it] - v) for it, v in points.items())
    criterion(7, "warmup schedule", err <= 1e-12,
              "lr(0)={:.4e} lr(500)={:.4e} lr(1000)={:.4e} lr(5000)={:.4e}, max err {:.1e}".format(
                  got[0], got[500], got[1000], got[5000], err))


def test_fusion_normalization(criterion):
    rng = np.random.default_rng(8)
    worst_sum, in_range = 0.0, 0
    for _ in range(100):
        k, C = int(rng.integers(1, 6)), int(rng.integers(2, 8))
        stack = rng.uniform(-1, 1, size=(k + 1, C, 5, 7))
        tau1, gamma = rng.uniform(0.01, 20), rng.uniform(0, 50)
        worst_sum = max(worst_sum, float(np.abs(fuse(stack, tau1).value.sum(axis=0) - 1).max()))
        pooled = gpr_pooled(stack[0], gamma).value
        flat = stack[0].reshape(C, -1)
        in_range += bool(np.all((pooled >= flat.min(axis=1)) & (pooled <= flat.max(axis=1))))
    criterion(8, "fusion normalization", worst_sum <= 1e-12 and in_range == 100,
              f"max |sum - 1| {worst_sum:.1e}; pooled in range on {in_range}/100")


def test_freezing_contract(world, trained, transferred, criterion):
    teacher, _, student, _ = transferred
    fresh_enc = build_encoders(EncoderConfig(D=32, seed=0))
    _, fresh_vocab = gen_synthetic(SynthConfig(scenes_n=1), fresh_enc)
    enc_ok = world.enc.fingerprint() == fresh_enc.fingerprint()
    words_ok = world.vocab.fingerprint() == fresh_vocab.fingerprint()
    snapshot = class_vectors(trained[1], world.vocab, world.enc.text).value
    head_ok = student.head.tobytes() == teacher.tvecs.tobytes() == snapshot.tobytes()
    criterion(9, "freezing contract", enc_ok and words_ok and head_ok,
              f"encoders {enc_ok}, word embeddings {words_ok}, student head == teacher snapshot {head_ok}")


def test_knowledge_transfer(world, transferred, criterion):
    teacher, _, student, log = transferred
    held = world.held_out(10, HELD_OUT)
    agree = agreement(student, teacher, held)
    preds = np.concatenate([student_infer(student, s.features)[1].ravel() for s in held])
    unseen = int(np.isin(preds, world.vocab.unseen_ids).sum())
    guided = sum(r["guided"] for r in log)
    criterion(10, "knowledge transfer", agree >= 0.9 and unseen > 0,
              f"agreement {agree:.4f} on 10 held-out scenes, {unseen} unseen-class pixels, "
              f"{guided}/{len(log)} guided iterations")


def test_determinism(world, trained, criterion, tmp_path):
    bank, first, log_a = trained
    second, log_b = train_prompts(world.train_scenes, bank, world.vocab, world.enc, desk_config())
    worst = max(float(np.max(np.abs(log_a.column(f) - log_b.column(f)))) for f in LOG_FIELDS)
    paths = [str(tmp_path / f"{i}.mvpp") for i in range(2)]
    for b, p in zip((first, second), paths):
        save_prompts(b, p, 0, 0, 0)
    same = open(paths[0], "rb").read() == open(paths[1], "rb").read()
    criterion(11, "determinism", len(log_a) == len(log_b) and worst <= 1e-12 and same,
              f"{len(log_a)} log records, max diff {worst:.1e}, checkpoints identical {same}")


def test_pooling_projection_link(criterion):
    rng = np.random.default_rng(12)
    worst = 0.0
    for i in range(20):
        D = int(rng.integers(2, 33))
        enc = build_encoders(EncoderConfig(D=D, seed=i))
        H, W = (int(v) for v in rng.integers(1, 7, size=2))
        X = np.broadcast_to(rng.normal(size=D), (H, W, D)).copy()
        pooled = attn_pool(X, enc.proj_q, enc.proj_k, enc.projector, enc.cfg.T_temp).value
        dense = dense_project(X, enc.projector, normalize=False).value
        h, w = int(rng.integers(H)), int(rng.integers(W))
        worst = max(worst, float(np.abs(pooled - dense[h, w]).max()))
    criterion(12, "pooling/projection link", worst <= 1e-10, f"max |attn_pool - pixel| {worst:.1e} over 20 inputs")
