import pytest

from mvpseg.encoders import EncoderConfig, build_encoders
from mvpseg.evalio import SynthConfig, gen_synthetic, mask_unseen
from mvpseg.prompts import init_prompt_bank
from mvpseg.trainer import desk_config, train_prompts


class World:
    """Default synthetic set with its frozen encoders."""

    def __init__(self, seed=0):
        self.cfg = SynthConfig(seed=seed)
        self.enc = build_encoders(EncoderConfig(D=self.cfg.D, seed=seed))
        self.scenes, self.vocab = gen_synthetic(self.cfg, self.enc)
        self.train_scenes = mask_unseen(self.scenes, self.vocab)

    def held_out(self, n=10, scene_seed=1000):
        cfg = SynthConfig(seed=self.cfg.seed, scene_seed=scene_seed, scenes_n=n)
        return gen_synthetic(cfg, self.enc)[0]


@pytest.fixture(scope="session")
def world():
    return World()


@pytest.fixture(scope="session")
def trained(world):
    """(initial bank, trained bank, log) for the default k=3 desk run."""
    bank = init_prompt_bank(3, 8, world.cfg.D, seed=0)
    out, log = train_prompts(world.train_scenes, bank, world.vocab, world.enc, desk_config())
    return bank, out, log


@pytest.fixture(scope="session")
def transferred(world, trained):
    """(teacher, initial student, trained student, log) for the default transfer run."""
    from mvpseg.transfer import Teacher, TransferConfig, init_student, train_student

    teacher = Teacher(trained[1], world.vocab, world.enc)
    student = init_student(teacher, world.cfg.D)
    out, log = train_student(world.scenes, teacher, student, TransferConfig())
    return teacher, student, out, log


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def record(n: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _CRITERIA[n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
