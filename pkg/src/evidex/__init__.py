"""Evidence table extraction pipeline with per-cell provenance.

Two independent extraction agents fill an ontology-aligned table from a
parsed document; disagreements are adjudicated by a reconciler that must
inspect the disputed pages; every value keeps its evidence chain for
human review.
"""

__version__ = "0.1.0"

NOT_REPORTED = "Not reported"


def is_not_reported(value: str) -> bool:
    """True if *value* is the canonical missing-value sentinel (lenient on case/spacing)."""
    return " ".join(value.split()).casefold() == NOT_REPORTED.casefold()
