"""dmlocate: weakly supervised lesion localization on synthetic chest phantoms."""

__version__ = "0.1.0"
