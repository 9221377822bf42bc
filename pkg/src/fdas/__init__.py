"""Power-minimal joint beamforming, uplink power control, and antenna selection
for full-duplex distributed-antenna networks."""

from . import conic, gbd, harness, metrics, reference, reform, sca, scenario, units

__all__ = ["conic", "gbd", "harness", "metrics", "reference", "reform", "sca",
           "scenario", "units"]
__version__ = "0.1.0"
