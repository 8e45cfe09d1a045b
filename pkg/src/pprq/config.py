"""Shared key-value configuration for the four executables.

One plain-text file can configure every tool.  Lines are ``key = value``;
``#`` starts a comment.  Keys may be scoped with the tool name so a single
file serves all roles, e.g.::

    # federated-cloud demo
    cloud1.listen = 127.0.0.1:7501
    cloud1.peer   = 127.0.0.1:7502
    cloud1.table  = demo.pprq
    cloud2.listen = 127.0.0.1:7502
    cloud2.sk     = keys/sk.ppqk
    allow         = alice,bob

A tool looks up ``<tool>.<key>`` first and falls back to the bare ``key``.
Command-line flags always win over the file; every flag has a config
equivalent under its own name (dashes become underscores).
"""

from __future__ import annotations

from dataclasses import dataclass, field


class ConfigError(Exception):
    pass


@dataclass
class Config:
    values: dict[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "Config":
        values: dict[str, str] = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                values[key.strip()] = value.strip()
        return cls(values)

    def get(self, scope: str, key: str, default: str | None = None) -> str | None:
        return self.values.get(f"{scope}.{key}", self.values.get(key, default))

    def get_int(self, scope: str, key: str, default: int | None = None) -> int | None:
        raw = self.get(scope, key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from None

    def get_list(self, scope: str, key: str) -> list[str] | None:
        raw = self.get(scope, key)
        if raw is None:
            return None
        return [item.strip() for item in raw.split(",") if item.strip()]
