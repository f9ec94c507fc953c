"""Named run presets: particle ladders and replicate counts."""

from dataclasses import dataclass, field


@dataclass
class RunPreset:
    """Ladder sizes for one desk-scale profile."""

    particles: list[int] = field(default_factory=list)
    replicates: int = 100


# Preset name -> ladders
_RUN_PRESETS = {
    "quick": RunPreset(particles=[250, 1000, 4000], replicates=100),
    "paper": RunPreset(particles=[500, 2000, 8000, 32000], replicates=500),
}

DEFAULT_PRESET = "quick"


class PresetMapper:
    """Resolves preset names to run sizes."""

    def get_preset(self, name: str) -> RunPreset:
        """Get the preset for a name.

        Args:
            name: Preset name (quick, paper); unknown names fall back to quick

        Returns:
            A fresh RunPreset the caller may modify
        """
        base = _RUN_PRESETS.get(name, _RUN_PRESETS[DEFAULT_PRESET])
        return RunPreset(particles=list(base.particles), replicates=base.replicates)

    def available_presets(self) -> list[str]:
        """List all preset names."""
        return list(_RUN_PRESETS.keys())
