"""The three ways a prefix becomes a feature row, side by side."""

import numpy as np

from xppa import EncoderConfig, KpiSpec, build_dataset, synthetic

log = synthetic.ticket_log(50, seed=2)
kpi = KpiSpec.remaining_time()
np.set_printoptions(precision=2, suppress=True, linewidth=140)

for history in (0, 2, "aggr"):
    ds = build_dataset(log, kpi, EncoderConfig.with_history(history))
    print(f"history={history!r}: {len(ds)} rows x {ds.width} columns")
    print("   columns:", ", ".join(ds.feature_names[:12]), "..." if ds.width > 12 else "")
    print("   row for the 3-event prefix of", ds.row_provenance[2][0], ":", ds.rows[2][:12])
    print()

# the labels are the remaining time of each prefix, in seconds
print("remaining days of the first case:", np.round(build_dataset(log, kpi, EncoderConfig()).labels[:7] / 86400, 2))
