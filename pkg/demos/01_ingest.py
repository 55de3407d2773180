"""Load a flat CSV export, look at its shape and walk the prefixes of one case."""

import io

from xppa import CsvConfig, log_statistics, parse_csv, prefixes, synthetic, write_csv

# a generated help-desk log written out and read back, as a real export would be
buf = io.StringIO()
write_csv(synthetic.ticket_log(200, seed=1), buf)
log = parse_csv(io.StringIO(buf.getvalue()), CsvConfig())

print("attribute kinds:", {k: v.value for k, v in log.attribute_schema.items()})
for key, value in log_statistics(log).as_dict().items():
    print(f"  {key:>22}: {value}")

case = log.traces[0]
print(f"\nprefixes of {case.case_id}:")
for p in prefixes(case):
    print("  ", " > ".join(e.activity for e in p.events))
