"""instlat: lattice gauge fields, flat moduli and Floer-type chain data on
circle-fibered 3-complexes."""

__version__ = "0.1.0"
