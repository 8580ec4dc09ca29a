"""Command-line entry point: gen-data, train, eval, transfer, gradcheck, sweep."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import fields

import numpy as np

from mvpseg import numgrad as ng
from mvpseg.encoders import EncoderConfig, Encoders, build_encoders
from mvpseg.evalio import Confusion, SynthConfig, gen_synthetic, mask_unseen, report, write_report
from mvpseg.evalio.formats import (
    load_prompts,
    load_student,
    read_dataset,
    save_prompts,
    save_student,
    write_dataset,
)
from mvpseg.maskhead import LossWeights
from mvpseg.prompts import ClassVocab, init_prompt_bank
from mvpseg.trainer import TrainConfig, batch_loss, desk_config, evaluate, train_prompts
from mvpseg.transfer import (
    Teacher,
    TransferConfig,
    agreement,
    init_student,
    student_infer,
    train_student,
)

GRADCHECK_LIMIT = 1e-3


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


_DESK = desk_config()
_XFER = TransferConfig()

# key -> (parser, default)
KEYS: dict[str, tuple] = {
    "seed": (int, 0),
    # synthetic world
    **{f.name: ({"int": int, "float": float}[f.type], f.default)
       for f in fields(SynthConfig) if f.name != "seed"},
    # prompt learning
    "k": (int, _DESK.k),
    "T": (int, 8),
    "prompt_std": (float, 0.02),
    "iters": (int, _DESK.total_iters),
    "lr": (float, _DESK.lr),
    "weight_decay": (float, _DESK.weight_decay),
    "warmup_iters": (int, _DESK.warmup_iters),
    "warmup_ratio": (float, _DESK.warmup_ratio),
    "batch_size": (int, _DESK.batch_size),
    "use_ocloss": (_bool, True),
    "use_gpr": (_bool, True),
    "cls_negative": (_bool, False),
    "lambda1": (float, _DESK.weights.lambda1),
    "lambda2": (float, _DESK.weights.lambda2),
    "lambda3": (float, _DESK.weights.lambda3),
    "gamma": (float, _DESK.weights.gamma),
    # knowledge transfer
    "transfer_iters": (int, _XFER.total_iters),
    "guided_fraction": (float, _XFER.guided_fraction),
    "transfer_lr": (float, _XFER.lr),
    "transfer_weight_decay": (float, _XFER.weight_decay),
    "transfer_warmup_iters": (int, _XFER.warmup_iters),
    "transfer_batch_size": (int, _XFER.batch_size),
    "student_hidden": (_opt_int, None),
    "student_init": (str, "warm"),
    "pseudo_confidence_threshold": (_opt_float, None),
    # gradcheck instance
    "gc_H": (int, 6),
    "gc_W": (int, 6),
    "gc_C": (int, 5),
    "gc_D": (int, 16),
    "gc_T": (int, 4),
}


class RunConfig:
    """Flat key=value configuration; file values first, then overrides."""

    def __init__(self, values: dict | None = None):
        self.values = {key: default for key, (_, default) in KEYS.items()}
        for key, val in (values or {}).items():
            self.set(key, val)

    def set(self, key: str, value) -> None:
        if key not in KEYS:
            raise ValueError(f"unknown config key: {key!r}")
        parse = KEYS[key][0]
        try:
            self.values[key] = parse(value) if isinstance(value, str) else value
        except ValueError as err:
            raise ValueError(f"bad value for {key!r}: {err}") from None

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def parse(cls, text: str) -> RunConfig:
        cfg = cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path: str | None) -> RunConfig:
        if path is None:
            return cls()
        with open(path) as f:
            return cls.parse(f.read())

    def synth(self, **overrides) -> SynthConfig:
        kw = {f.name: self[f.name] for f in fields(SynthConfig) if f.name != "seed"}
        kw.update(seed=self["seed"], **overrides)
        return SynthConfig(**kw)

    def weights(self) -> LossWeights:
        return LossWeights(self["lambda1"], self["lambda2"], self["lambda3"], self["gamma"])

    def train(self, **overrides) -> TrainConfig:
        kw = dict(
            # a run shorter than the warmup just warms up for its whole length
            lr=self["lr"], weight_decay=self["weight_decay"], warmup_iters=min(self["warmup_iters"], self["iters"]),
            warmup_ratio=self["warmup_ratio"], total_iters=self["iters"], batch_size=self["batch_size"],
            seed=self["seed"], weights=self.weights(), k=self["k"], use_ocloss=self["use_ocloss"],
            use_gpr=self["use_gpr"], cls_negative=self["cls_negative"],
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def transfer(self) -> TransferConfig:
        return TransferConfig(
            total_iters=self["transfer_iters"], guided_fraction=self["guided_fraction"],
            lr=self["transfer_lr"], weight_decay=self["transfer_weight_decay"],
            warmup_iters=min(self["transfer_warmup_iters"], self["transfer_iters"]), batch_size=self["transfer_batch_size"],
            hidden=self["student_hidden"], seed=self["seed"],
            pseudo_confidence_threshold=self["pseudo_confidence_threshold"],
        )


def _encoders_for(ds) -> Encoders:
    D = ds.scenes[0].features.shape[2]
    return build_encoders(EncoderConfig(D=D, seed=ds.encoder_seed))


def _train_scenes(ds, mask: bool):
    return mask_unseen(ds.scenes, ds.vocab) if mask else ds.scenes


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    scfg = cfg.synth()
    enc = build_encoders(EncoderConfig(D=scfg.D, seed=cfg["seed"]))
    scenes, vocab = gen_synthetic(scfg, enc)
    write_dataset(scenes, vocab, args.out, encoder_seed=cfg["seed"])
    counts = np.bincount(np.concatenate([s.labels.ravel() for s in scenes]), minlength=vocab.C)
    print(f"wrote {len(scenes)} scenes of {scfg.H}x{scfg.W}x{scfg.D} to {args.out}")
    print(f"classes: C={vocab.C} seen={vocab.seen_ids} unseen={vocab.unseen_ids}")
    print("pixels per class: " + " ".join(str(int(n)) for n in counts))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    ds = read_dataset(args.data)
    enc = _encoders_for(ds)
    tcfg = cfg.train()
    bank = init_prompt_bank(tcfg.k, cfg["T"], enc.cfg.D, cfg["seed"], std=cfg["prompt_std"])
    trained, log = train_prompts(_train_scenes(ds, not args.no_mask_unseen), bank, ds.vocab, enc, tcfg)
    save_prompts(trained, args.out, ds.encoder_seed, cfg["seed"], cfg["seed"])
    log_path = args.log or args.out + ".log.csv"
    log.to_csv(log_path)
    if len(log):
        first, last = log.records[0], log.records[-1]
        print(f"iters={len(log)} l_total {first['l_total']:.6g} -> {last['l_total']:.6g}"
              f"  l_oc {first['l_oc']:.6g} -> {last['l_oc']:.6g}  max|cos| {last['max_abs_cos']:.4f}")
    print(f"checkpoint: {args.out}  log: {log_path}")
    return 0


def _magic(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read(4)


def _load_teacher(path: str, ds, enc: Encoders, cfg: RunConfig, use_gpr: bool) -> Teacher:
    ck = load_prompts(path, expect_D=enc.cfg.D)
    return Teacher(ck.bank, ds.vocab, enc, gamma=cfg["gamma"], use_gpr=use_gpr)


def cmd_eval(cfg: RunConfig, args) -> int:
    ds = read_dataset(args.data)
    enc = _encoders_for(ds)
    use_gpr = cfg["use_gpr"]
    conf = Confusion(ds.vocab.C)
    if _magic(args.ckpt) == b"MVSS":
        student = load_student(args.ckpt)
        if student.head.shape[1:] != (ds.vocab.C, enc.cfg.D) or student.W1.shape[1] != enc.cfg.D:
            raise ValueError(
                f"dimension mismatch: student head {student.head.shape}, dataset C={ds.vocab.C} D={enc.cfg.D}"
            )
        for s in ds.scenes:
            conf.add(s.labels, student_infer(student, s.features)[1])
        if args.teacher:
            teacher = _load_teacher(args.teacher, ds, enc, cfg, student.use_gpr)
            print(f"agreement with teacher: {agreement(student, teacher, ds.scenes):.4f}")
    else:
        ck = load_prompts(args.ckpt, expect_D=enc.cfg.D)
        conf = evaluate(ck.bank, ds.vocab, enc, ds.scenes, cfg["gamma"], use_gpr)
    rep = report(conf, ds.vocab.seen_ids, ds.vocab.unseen_ids)
    key = {"all": "miou_all", "seen": "miou_seen", "unseen": "miou_unseen"}[args.classes]
    print(f"{key}={rep[key]:.4f} hiou={rep['hiou']:.4f}")
    if args.report:
        write_report(rep, args.report)
    return 0


def cmd_transfer(cfg: RunConfig, args) -> int:
    ds = read_dataset(args.data)
    enc = _encoders_for(ds)
    teacher = _load_teacher(args.ckpt, ds, enc, cfg, cfg["use_gpr"])
    xcfg = cfg.transfer()
    student = init_student(teacher, enc.cfg.D, xcfg.hidden, seed=cfg["seed"], init=cfg["student_init"])
    student, _ = train_student(ds.scenes, teacher, student, xcfg)
    save_student(student, args.out)
    print(f"agreement with teacher: {agreement(student, teacher, ds.scenes):.4f}")
    print(f"student: {args.out}")
    return 0


def gradcheck_instance(H=6, W=6, C=5, D=16, k=3, T=4, seed=0, weights=None, use_gpr=True, use_ocloss=True):
    """Worst relative error of the full-loss gradient w.r.t. prompts, tau1, tau2
    on a seeded random instance."""
    rng = np.random.default_rng(seed)
    enc = build_encoders(EncoderConfig(D=D, seed=seed))
    words = [rng.normal(size=(int(rng.integers(1, 3)), D)) for _ in range(C)]
    vocab = ClassVocab([f"class{c}" for c in range(C)], words, [True] * C)
    bank = init_prompt_bank(k, T, D, seed, std=0.5)
    bank.tau1.assign(np.array(1.7))
    bank.tau2.assign(np.array(0.8))
    F = rng.normal(size=(H, W, D))
    F /= np.linalg.norm(F, axis=-1, keepdims=True)
    labels = rng.integers(0, C, size=(H, W))
    tcfg = TrainConfig(k=k, weights=weights or LossWeights(), use_gpr=use_gpr, use_ocloss=use_ocloss,
                       warmup_iters=0, total_iters=0)
    return ng.gradcheck(lambda: batch_loss(bank, vocab, enc, [F], [labels], tcfg)[0], bank.parameters())


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    err = gradcheck_instance(cfg["gc_H"], cfg["gc_W"], cfg["gc_C"], cfg["gc_D"], cfg["k"], cfg["gc_T"],
                             cfg["seed"], cfg.weights(), cfg["use_gpr"], cfg["use_ocloss"])
    ok = err <= GRADCHECK_LIMIT
    print(f"max relative gradient error: {err:.3e} ({'pass' if ok else 'FAIL'}, limit {GRADCHECK_LIMIT:g})")
    return 0 if ok else 1


SWEEP_FIELDS = ("k", "use_ocloss", "use_gpr", "miou_seen", "miou_unseen", "miou_all", "hiou")


def cmd_sweep(cfg: RunConfig, args) -> int:
    ds = read_dataset(args.data)
    enc = _encoders_for(ds)
    test = read_dataset(args.test) if args.test else ds
    ks = [int(x) for x in args.k_list.split(",")]
    toggles = [(o, g) for o in (True, False) for g in (True, False)] if args.ablate else [(cfg["use_ocloss"], cfg["use_gpr"])]
    scenes = mask_unseen(ds.scenes, ds.vocab)
    rows = []
    for k in ks:
        for use_oc, use_gpr in toggles:
            tcfg = cfg.train(k=k, use_ocloss=use_oc, use_gpr=use_gpr)
            bank = init_prompt_bank(k, cfg["T"], enc.cfg.D, cfg["seed"], std=cfg["prompt_std"])
            trained, _ = train_prompts(scenes, bank, ds.vocab, enc, tcfg)
            rep = report(evaluate(trained, test.vocab, enc, test.scenes, cfg["gamma"], use_gpr),
                         test.vocab.seen_ids, test.vocab.unseen_ids)
            rows.append([k, int(use_oc), int(use_gpr)] + [repr(rep[f]) for f in SWEEP_FIELDS[3:]])
            print(f"k={k} ocloss={int(use_oc)} gpr={int(use_gpr)} "
                  f"unseen={rep['miou_unseen']:.4f} seen={rep['miou_seen']:.4f} hiou={rep['hiou']:.4f}", flush=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_FIELDS)
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvpseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", required=out_required, help="output path")
        return p

    common(sub.add_parser("gen-data", help="write a synthetic dataset"))

    p = common(sub.add_parser("train", help="learn prompts on seen classes"))
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, help="segmentation prompt count")
    p.add_argument("--iters", type=int)
    p.add_argument("--log", help="TrainLog CSV path (default: <out>.log.csv)")
    p.add_argument("--no-mask-unseen", action="store_true",
                   help="keep unseen labels (training then refuses to run)")

    p = common(sub.add_parser("eval", help="score a prompt or student checkpoint"), out_required=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--classes", choices=("all", "seen", "unseen"), default="all")
    p.add_argument("--report", help="write metrics as .json or .csv")
    p.add_argument("--teacher", help="prompt checkpoint; prints student/teacher agreement")

    p = common(sub.add_parser("transfer", help="train a student from a prompt checkpoint"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = common(sub.add_parser("gradcheck", help="finite-difference check of the full loss"), out_required=False)
    p.add_argument("--k", type=int)

    p = common(sub.add_parser("sweep", help="prompt-count and ablation sweep"))
    p.add_argument("--data", required=True)
    p.add_argument("--test", help="held-out dataset for scoring (default: --data)")
    p.add_argument("--k-list", default="1,2,3,4,5")
    p.add_argument("--ablate", action="store_true", help="also toggle OCLoss and GPR")
    p.add_argument("--iters", type=int)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        for item in args.set:
            if "=" not in item:
                raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
            cfg.set(*(s.strip() for s in item.split("=", 1)))
        for key in ("seed", "k", "iters"):
            if getattr(args, key, None) is not None:
                cfg.set(key, getattr(args, key))
        return COMMANDS[args.command](cfg, args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
