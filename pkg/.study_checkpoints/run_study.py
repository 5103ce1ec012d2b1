"""Populate simulation-study checkpoints for the acceptance suite."""
import sys
import time

from dichogeo.numerics import limit_blas_threads
from dichogeo.simstudy import run_study, table_one_specs

limit_blas_threads()
CKPT = "/root/pkg/.study_checkpoints/seed20260810_n200"
specs = table_one_specs(n_reps=200, seed=20260810)

def progress(cell):
    print(f"[{time.strftime('%H:%M:%S')}] done {cell.spec.tag}: "
          f"ok B={cell.n_ok['B']} C={cell.n_ok['C']}", flush=True)

report = run_study(specs, workers=2, checkpoint_dir=CKPT, progress=progress)
print("STUDY COMPLETE", flush=True)
