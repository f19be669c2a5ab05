"""
End to end on synthetic scenes
==============================

Generates procedural aerial-like scenes, trains a small AC network, predicts
the held-out scenes tile by tile, refines them with the dense CRF and prints
the F1 / overall-accuracy tables.  Takes a couple of minutes on one core.
"""

import sys
import tempfile

from landseg.cli import run_demo

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="landseg-demo-")
result = run_demo(out)
print(result["report"])
print(f"raw OA {result['oa_raw']:.4f}, after CRF {result['oa_crf']:.4f}, {result['seconds']:.0f}s")
print("artifacts in", out)
