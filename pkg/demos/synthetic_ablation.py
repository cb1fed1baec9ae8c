"""Train TAM-RL and FOMAML on a synthetic mode set and compare the variants.

    python3 demos/synthetic_ablation.py [SET1|SET2|SET3]

Runs configs/synthetic.yaml with a single ensemble member and a third of the
training tasks, which takes a few minutes.
"""
import sys
from pathlib import Path

from tamrl.config import read_manifest
from tamrl.experiment import evaluate, synthetic_dataset, train_fomaml_ensemble, train_tamrl

MANIFEST = Path(__file__).parents[1] / "configs" / "synthetic.yaml"


def main(set_name: str = "SET1") -> None:
    cfg = read_manifest(MANIFEST, {"synth.set": set_name, "ensemble.size": 1, "synth.train_tasks_per_mode": 1000})
    data = synthetic_dataset(cfg)
    print(f"{set_name}: {len(data.train_batch)} training tasks")

    members = train_tamrl(cfg, data)
    scratch = train_tamrl(cfg, data, pretrain=False)
    fomaml = train_fomaml_ensemble(cfg, data)

    runs = [
        ("tamrl", members),
        ("tamrl-no-finetune", members),
        ("tamrl-no-pretrain", scratch),
        ("tamrl-no-finetune-no-pretrain", scratch),
        ("base", members),
        ("fomaml", fomaml),
    ]
    print(f"{'model':<32}query MSE")
    for variant, ms in runs:
        _, mse = evaluate(cfg, data, variant, ms)
        print(f"{variant:<32}{mse[set_name]:.4f}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
