"""Object-aware autonomous scene scanning simulator.

A mobile depth sensor explores an unknown room in one pass, interleaving
next-best-object (NBO) selection with next-best-view (NBV) planning.  Objects
are recognized against a database of virtually scanned shapes through an
objectness score, segmented by multi-class graph cuts, fine-scanned with
information-gain views, and replaced by their best-matching database model.
"""

__version__ = "0.1.0"
