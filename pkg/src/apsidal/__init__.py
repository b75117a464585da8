"""High-order invariant-manifold parameterizations on apsidal Poincare
sections of the planar circular restricted three-body problem, and the
heteroclinic connections between them."""

__version__ = "0.1.0"
