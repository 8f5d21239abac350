"""OTFS-based grant-free random access over a cooperative LEO constellation.

Subpackages cover the simulation chain end to end:

* ``numerics``  - complex Gaussian message algebra, DFT helpers, CG solver
* ``channel``   - geometry sampling, basis-expansion fits, angular transforms
* ``otfs``      - delay-Doppler frame layout, modulation, demodulation
* ``ddio``      - delay-Doppler input/output relations and pilot measurements
* ``gamp``      - generalized approximate message passing engine
* ``initial``   - joint activity detection and coarse channel estimation
* ``aep``       - centralized approximate expectation-propagation refinement
* ``daep``      - distributed refinement with inter-satellite message exchange
* ``harness``   - Monte-Carlo trials, sweeps, metrics, baselines
"""

__version__ = "0.1.0"
