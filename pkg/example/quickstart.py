import orthofcl as ofcl
from orthofcl.metrics import forgetting

config = ofcl.ExperimentConfig(num_tasks=5, beta=0.5).replace(
    round__num_clients=5, round__local_epochs=3
)
report = ofcl.run_experiment(config, threads=4)

print(report.accuracy.to_csv())
print(f"FAA {report.faa:.4f}")
print(f"forgetting {forgetting(report.accuracy):.4f}")
print(f"upload {report.ledger.total_upload()} parameters")
