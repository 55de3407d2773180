"""Explain predictions of a trained model, one case at a time and across the test set."""

import tempfile
from pathlib import Path

from xppa import PayoutConfig, exact_shapley, sampled_shapley, synthetic, write_csv
from xppa.pipeline import Context, RunConfig, evaluate_stage, explain_stage, fit_stage

work = Path(tempfile.mkdtemp())
write_csv(synthetic.ticket_log(500, seed=4), work / "log.csv")
cfg = RunConfig(log=str(work / "log.csv"), kpi={"kind": "remaining_time"},
                search={"mode": "fixed", "history": 0, "grid": {"n_trees": [150], "max_depth": [4]}},
                train={"min_samples_leaf": 10})

ctx = Context.load(cfg)
fitted = fit_stage(ctx)
ev = evaluate_stage(ctx, fitted)
records, global_rows, cases = explain_stage(ctx, fitted, ev.test_ds)

case = cases[0]
print(f"case {case['case_id']} after {case['prefix_length']} events (last: {case['last_activity']})")
print(f"  predicted remaining {case['prediction']:.2f} days, average {case['kpi_average']:.2f} days")
for e in sorted(case["explanations"], key=lambda e: -abs(e["shap"]))[:5]:
    print(f"  {e['shap']:+7.2f}  {e['label']}")
print(f"  contributions sum to {case['shap_total']:+.2f} = prediction - base value {case['base_value']:.2f}")

print("\nstrongest influences over the test set (mean days, number of prefixes):")
for g in global_rows[:8]:
    print(f"  {g['mean']:+7.2f}  {g['count']:5d}  {g['label']}")

# permutation sampling approximates exact enumeration; 4 features have only 24 orderings,
# so a budget of 10 is a real sample
model = fitted.model
payout = PayoutConfig.from_rows(fitted.train_ds.rows, 100)
x = ev.test_ds.rows[0]
exact = exact_shapley(model.predict, x, payout).values / 86400
approx = sampled_shapley(model.predict, x, payout, n_permutations=10, seed=1).values / 86400
print("\nexact   :", " ".join(f"{v:+.3f}" for v in exact))
print("sampled :", " ".join(f"{v:+.3f}" for v in approx))
