"""
Counting parameters, FLOPS and activations
==========================================

Everything here is static analysis: no weights are allocated.
"""

from dvmsr.model import ModelConfig, preset
from dvmsr.profiler import PUBLISHED_PARAMS, calibrate, count_params, profile

# the lightweight student and its bidirectional variant, on a 256x256 input
student = preset("student")
print(profile(student).format_table())
print()
print(profile(student.replace(bidirectional=True)).format_table())
print()

# every published row, against the one calibrated hyperparameter set
for label, kw, target in PUBLISHED_PARAMS:
    p = count_params(ModelConfig(**kw)) / 1e6
    print(f"{label:<24} {p:8.4f} M   published {target:7.4f} M   {p / target - 1:+.3%}")

# the calibration grid, best settings first
print()
for row in calibrate()[:3]:
    print(f"{row.max_rel_err:.4%}  {row.hyper}")
