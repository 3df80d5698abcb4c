"""Build a semantic layer of validated database views over a relational schema."""

__version__ = "0.1.0"
