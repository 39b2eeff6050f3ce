import statistics

import orthofcl as ofcl
from orthofcl.federated import run_seeds

SEEDS = [0, 1, 2, 3, 4]

# Layer-0 tokens of 16-feature patches span at most 17 of the 32 directions.
base = ofcl.ExperimentConfig(
    backbone=ofcl.BackboneConfig(embed_dim=32, num_tokens=5, input_dim=64),
    memory=ofcl.MemoryConfig(energy_threshold=0.99),
    round=ofcl.RoundConfig(num_clients=2, local_epochs=8, batch_size=8),
    data=ofcl.SyntheticConfig(
        num_classes=6, samples_per_class=40, input_dim=64, cluster_spread=0.02
    ),
    num_tasks=3,
    beta=1.0,
    lr_adapter=0.02,
)
variants = {
    "orthogonal": base,
    "random bases": base.replace(random_a=True),
    "frozen memory": base.replace(no_memory_update=True),
    "weighted bases": base.replace(weighted_a_avg=True),
}

scores = {}
for name, config in variants.items():
    scores[name] = [report.faa for report in run_seeds(config, SEEDS, threads=4)]
    mean, std = statistics.fmean(scores[name]), statistics.stdev(scores[name])
    print(f"{name:>15}: FAA {mean:.4f} ± {std:.4f}")

margin = statistics.fmean(scores["orthogonal"]) - statistics.fmean(
    scores["random bases"]
)
print(f"margin over random bases: {margin:+.4f}")
