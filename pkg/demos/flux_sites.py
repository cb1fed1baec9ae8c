"""Few-shot regression on entity time series: the bundled flux-site sample.

    python3 demos/flux_sites.py

Held-out sites are adapted from 2 or 6 support windows and scored on the rest
of their record. The sample is synthetic, so only relative numbers matter.
"""
from pathlib import Path

from tamrl.config import read_manifest
from tamrl.experiment import build_dataset, evaluate, train_tamrl

FLUX = Path(__file__).parents[1] / "configs" / "flux-tiny.yaml"


def main() -> None:
    cfg = read_manifest(FLUX, {"ensemble.size": 1})
    data = build_dataset(cfg)
    members = train_tamrl(cfg, data)
    print("joint loss by epoch:", " ".join(f"{v:.3f}" for v in members[0].joint_curve))
    for variant in ("base", "tamrl-no-finetune", "tamrl"):
        _, mse = evaluate(cfg, data, variant, members)
        cells = "  ".join(f"{b} windows: {v:.3f}" for b, v in mse.items())
        print(f"{variant:<20}{cells}")


if __name__ == "__main__":
    main()
