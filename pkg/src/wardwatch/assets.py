"""Access to the workflow and scenario documents shipped with the package."""

from __future__ import annotations

from importlib import resources


def shipped_workflow_text(name: str) -> str:
    """Read a packaged workflow document by bare name (e.g. "gp_office")."""
    return (
        resources.files("wardwatch").joinpath(f"data/workflows/{name}.hwf").read_text(encoding="utf-8")
    )


def shipped_scenario_text(name: str) -> str:
    """Read a packaged scenario script by bare name (e.g. "gp_happy_path")."""
    return (
        resources.files("wardwatch").joinpath(f"data/scenarios/{name}.scn").read_text(encoding="utf-8")
    )


def shipped_workflow_names() -> list[str]:
    folder = resources.files("wardwatch").joinpath("data/workflows")
    return sorted(p.name[: -len(".hwf")] for p in folder.iterdir() if p.name.endswith(".hwf"))


def shipped_scenario_names() -> list[str]:
    folder = resources.files("wardwatch").joinpath("data/scenarios")
    return sorted(p.name[: -len(".scn")] for p in folder.iterdir() if p.name.endswith(".scn"))
