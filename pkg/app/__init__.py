__all__ = ["main"]

