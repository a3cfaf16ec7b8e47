"""Per-component parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass

GROUPS = ("backbone", "lsa", "lua", "bridge", "prefix", "prefix_store", "lid")


def component_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head in ("lsa", "lua", "bridge", "prefix", "prefix_store", "lid"):
        return head
    if ".attn_in." in name:
        return "lid"
    return "backbone"


@dataclass
class ParamsReport:
    counts: dict[str, int]
    frozen: int = 0

    @property
    def backbone(self) -> int:
        return self.counts.get("backbone", 0)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def ratio(self, group: str) -> float:
        """Size of ``group`` relative to the backbone."""
        return self.counts.get(group, 0) / self.backbone

    def rows(self) -> list[tuple[str, int, float]]:
        return [(g, self.counts[g], self.ratio(g)) for g in GROUPS if g in self.counts]

    def to_dict(self) -> dict:
        return {
            "counts": dict(self.counts),
            "ratios": {g: self.ratio(g) for g in self.counts if g != "backbone"},
            "total": self.total,
            "frozen": self.frozen,
        }


def params_report(params) -> ParamsReport:
    counts: dict[str, int] = {}
    frozen = 0
    for name, t in params.items():
        g = component_of(name)
        counts[g] = counts.get(g, 0) + t.data.size
        if not t.requires_grad:
            frozen += t.data.size
    return ParamsReport(counts, frozen)
