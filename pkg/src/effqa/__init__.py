"""Phrase-indexed question answering at desk scale: question-agnostic
candidate extraction, siamese encoding into a shared vector space, and
exact maximum-inner-product search."""

__version__ = "0.1.0"
