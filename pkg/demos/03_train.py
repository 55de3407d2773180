"""Pick the history length and the tree grid on a validation split, then score on test."""

from xppa import EncoderConfig, KpiSpec, TrainConfig, grid_search, history_search, score, split, synthetic
from xppa.gbdt import train
from xppa.pipeline import encode_pair, prefix_index_baseline

log = synthetic.ticket_log(600, seed=3)
kpi = KpiSpec.remaining_time()
train_log, val_log, test_log = split(log)
print(f"split: {len(train_log)} train / {len(val_log)} validation / {len(test_log)} test cases")

base = TrainConfig(min_samples_leaf=10)
search = history_search(train_log, val_log, kpi, base, max_k=4)
for config, s in search.trail:
    print(f"  history {config!s:>4}: validation MAE {s / 86400:.3f} days")
print("chosen history:", search.chosen_history)

cfg, trail = grid_search(train_log, val_log, kpi, search.chosen_history, base,
                         {"n_trees": [50, 150], "max_depth": [3, 6]})
print(f"chosen grid cell: {cfg.n_trees} trees, depth {cfg.max_depth}")

# the encoder is fitted on the training cases only and reused for the test cases
_, train_ds, test_ds = encode_pair(train_log, test_log, kpi, EncoderConfig.with_history(search.chosen_history))
model = train(train_ds, cfg)
print(f"test MAE {score(model, test_ds) / 86400:.3f} days, "
      f"prefix-index baseline {prefix_index_baseline(train_ds, test_ds) / 86400:.3f} days")
