"""coopsim: cooperative perception over a simulated wireless edge.

Vehicles localize nearby objects with a detector/tracker hybrid, compress
object point clouds into fixed-budget latents, and upload them to an edge
server that fuses a global object map.  A per-vehicle controller picks which
objects to send and how hard to compress them subject to a percentile bound
on end-to-end latency.
"""

__version__ = "0.1.0"
