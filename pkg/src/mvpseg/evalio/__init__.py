"""Metrics, the synthetic scene generator, and binary file formats."""

from mvpseg.evalio.metrics import Confusion, hiou, miou, report, write_report
from mvpseg.evalio.synthetic import Scene, SynthConfig, gen_synthetic, mask_unseen

__all__ = [
    "Confusion",
    "Scene",
    "SynthConfig",
    "gen_synthetic",
    "hiou",
    "mask_unseen",
    "miou",
    "report",
    "write_report",
]
