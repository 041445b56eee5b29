"""Traffic signal control lab: queue simulator, baselines, and a multi-agent
soft actor-critic with hypergraph-encoded critics."""

__version__ = "0.1.0"
