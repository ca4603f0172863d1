"""Exception types shared across the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SimError):
    """Invalid configuration value or combination (CLI exit code 2)."""


class AddressError(SimError):
    """Logical address outside the device range."""


class ModeError(SimError):
    """Operation not available in the device's current mode."""


class HintError(SimError):
    """Placement identifier outside the configured handle range."""


class ZoneStateError(SimError):
    """Zone operation violating the zone state machine."""


class ResourceError(SimError):
    """Open-zone or handle limit exhausted."""


class PlacementError(SimError):
    """Write not at the active zone's frontier."""


class NotFoundError(SimError):
    """Lookup of an unmapped page identifier."""


class IntegrityError(SimError):
    """Checksum mismatch or unparseable on-disk structure."""


class OrderingError(SimError):
    """LSN regression in a write history."""


class InvariantBreach(SimError):
    """Internal accounting identity violated (CLI exit code 3)."""


class DeviceFullError(InvariantBreach):
    """Device ran out of erasable superblocks; signals a NoWA violation."""
