"""Topological navigation with learned ray-based perception on a synthetic 2D world.

Submodules
----------
sim           occupancy-grid world, ray sensing and unicycle kinematics
segmentation  Gaussian-mixture room segmentation
nn            small numpy neural-network toolkit (MLP, GRU, losses, Adam)
perception    ray feature extractor, room classifier and passage detector
topo_map      topological map construction and persistence
localization  descriptor retrieval against map nodes
planning      shortest paths over the map graph
expert        scripted expert driver for demonstrations
policy        recurrent local policy trained by behavioral cloning
adaptation    adversarial feature alignment and passage-detector transfer
runtime       closed-loop navigation episodes
evaluation    episode sampling, metrics and benchmark reports
config        pipeline configuration schema
pipeline      resumable end-to-end experiment stages
cli           command-line entry point
"""

__version__ = "0.1.0"
