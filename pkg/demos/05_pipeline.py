"""
The whole pipeline from one config
==================================

Equivalent to ``tradecausal run --config demos/pipeline_config.json --out runs/demo``.
"""

import json
import sys
from pathlib import Path

from tradecausal.cli import PipelineConfig, run_pipeline

here = Path(__file__).parent
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/demo")
cfg = PipelineConfig.load(here / "pipeline_config.json")
manifest = run_pipeline(cfg, out)

info = json.loads(manifest.read_text())
print("stages:", info["stages_completed"])
print("seeds:", info["seeds"])
for a in info["artifacts"]:
    print(f"  {a['file']:18s} {a['bytes']:8d} bytes  {a['sha256'][:12]}")
print((out / "ate.csv").read_text())
