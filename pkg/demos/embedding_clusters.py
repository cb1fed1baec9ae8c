"""Do task embeddings separate the function families of a mode set?

    python3 demos/embedding_clusters.py

Trains one TAM-RL member (under a minute) on SET1, embeds each evaluation task from its
support set and reports how often a task's nearest neighbour in embedding
space shares its family. Chance is 1/3 for the three-family sets.
"""
from pathlib import Path

import numpy as np

from tamrl.adaptation import embeddings
from tamrl.config import read_manifest
from tamrl.experiment import synthetic_dataset, synthetic_split, train_tamrl

MANIFEST = Path(__file__).parents[1] / "configs" / "synthetic.yaml"


def main() -> None:
    cfg = read_manifest(MANIFEST, {"ensemble.size": 1, "synth.train_tasks_per_mode": 1000})
    data = synthetic_dataset(cfg)
    (member,) = train_tamrl(cfg, data)
    (_, [batch]), = data.evals
    z = embeddings(member, batch.support_x, batch.support_y)
    families = np.array([e.family for _, e in synthetic_split(cfg, "eval")])

    d = np.linalg.norm(z[:, None] - z[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    hit = families[d.argmin(axis=1)] == families
    print(f"{len(z)} tasks, embedding width {z.shape[1]}")
    for fam in np.unique(families):
        print(f"  {fam:<10} nearest neighbour same family: {hit[families == fam].mean():.2f}")
    print(f"  overall    {hit.mean():.2f}")


if __name__ == "__main__":
    main()
