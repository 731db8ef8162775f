"""Study harness helpers (see submodules for details)."""

__all__: list[str] = []
