"""Named callables referenced from task YAML by dotted name.

Lambdas, routers, tools, hooks, output transforms, generators and schema
validators are looked up here. Names registered explicitly win; otherwise a
dotted name falls back to a regular Python import so user modules on
``sys.path`` work without registration.
"""

from __future__ import annotations

import importlib
import inspect
from typing import Any, Callable


class UnresolvedName(LookupError):
    def __init__(self, name: str, reason: str = ""):
        self.name = name
        super().__init__(f"cannot resolve {name!r}" + (f": {reason}" if reason else ""))


class Registry:
    def __init__(self, entries: dict[str, Any] | None = None, allow_import: bool = True):
        self._entries: dict[str, Any] = dict(entries or {})
        self.allow_import = allow_import

    def register(self, name: str, obj: Any = None):
        """Register ``obj`` under ``name``; usable as a decorator."""
        if obj is None:
            def deco(fn):
                self._entries[name] = fn
                return fn
            return deco
        self._entries[name] = obj
        return obj

    def __contains__(self, name: str) -> bool:
        try:
            self.resolve(name)
        except UnresolvedName:
            return False
        return True

    def names(self) -> list[str]:
        return sorted(self._entries)

    def copy(self) -> "Registry":
        return Registry(self._entries, self.allow_import)

    def resolve(self, name: str) -> Any:
        if name in self._entries:
            return self._entries[name]
        if not self.allow_import or "." not in name:
            raise UnresolvedName(name)
        module_name, _, attr = name.rpartition(".")
        parts = [attr]
        while module_name:
            try:
                obj: Any = importlib.import_module(module_name)
            except ImportError:
                module_name, _, head = module_name.rpartition(".")
                parts.insert(0, head)
                continue
            except Exception as exc:  # noqa: BLE001 - module raised on import
                raise UnresolvedName(name, f"import failed: {exc}") from exc
            try:
                for p in parts:
                    obj = getattr(obj, p)
            except AttributeError:
                raise UnresolvedName(name) from None
            return obj
        raise UnresolvedName(name)


def as_callable(obj: Any, method: str = "apply") -> Callable:
    """Turn a registered object into a plain callable.

    Classes are instantiated without arguments; objects exposing ``method``
    (``apply`` by convention) use it, otherwise they must be callable.
    """
    if inspect.isclass(obj):
        if hasattr(obj, method) and isinstance(inspect.getattr_static(obj, method), staticmethod):
            return getattr(obj, method)
        obj = obj()
    if hasattr(obj, method) and not inspect.isfunction(obj):
        return getattr(obj, method)
    if callable(obj):
        return obj
    raise TypeError(f"{obj!r} is not callable")


def default_registry() -> Registry:
    """A registry pre-loaded with the shipped validators, tools and recipes."""
    from . import builtins

    reg = Registry()
    builtins.install(reg)
    return reg
