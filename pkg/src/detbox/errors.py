"""Exception types shared across the package.

Errors are grouped by the subsystem that raises them; all inherit from
:class:`DetboxError` so callers can catch the whole family at once.
"""

from __future__ import annotations


class DetboxError(Exception):
    """Base class for every error raised by this package."""


# --- configuration selection ------------------------------------------------

class CatalogError(DetboxError):
    """A catalog or perf file is malformed or violates its schema."""


class UnknownComponent(DetboxError):
    """A launch config enables a device id absent from the catalog."""


class NoFeasibleCandidate(DetboxError):
    """Feasibility filtering emptied the candidate set."""


class MissingPerfEntry(DetboxError):
    """The perf table lacks a (config, environment) entry the selector needs."""


class BadDistribution(DetboxError):
    """A probability distribution is empty, negative, or does not sum to 1."""


# --- host probing -----------------------------------------------------------

class UnsupportedArch(DetboxError):
    """The host machine string is not one of the supported ISAs."""

    def __init__(self, raw: str):
        super().__init__(f"unsupported host architecture: {raw!r}")
        self.raw = raw


# --- session lifecycle ------------------------------------------------------

class IllegalTransition(DetboxError):
    """An event arrived in a state with no matching FSM edge."""


class LaunchFailed(DetboxError):
    """The hypervisor backend could not start the guest."""


class WipeIncomplete(DetboxError):
    """Workspace entries survived teardown despite a deletion retry."""

    def __init__(self, leftovers: list[str]):
        super().__init__(f"workspace entries survived teardown: {leftovers}")
        self.leftovers = leftovers


class SameRun(DetboxError):
    """Sanitization was asked to compare manifests from the same run."""


# --- hypervisor backend -----------------------------------------------------

class InvalidConfig(DetboxError):
    """A launch config has contradictory fields and cannot be synthesized."""


class SpawnFailed(DetboxError):
    """The guest process could not be spawned."""


class GuestDied(DetboxError):
    """The guest process exited before its boot marker fired."""


# --- gateway ----------------------------------------------------------------

class UploadError(DetboxError):
    """Base class for upload rejections; carries the HTTP status to emit."""

    http_status = 400
    code = "upload_error"


class BadFormat(UploadError):
    """Uploaded bytes do not look like a QCOW2 image."""

    http_status = 415
    code = "bad_format"


class EmptyUpload(UploadError):
    """The upload stream contained no bytes."""

    http_status = 400
    code = "empty_upload"


class TooLarge(UploadError):
    """The upload exceeded the configured size cap."""

    http_status = 413
    code = "too_large"


class WrongState(UploadError):
    """An upload arrived outside the LOADER state (or one is in flight)."""

    http_status = 409
    code = "wrong_state"


# --- analytics --------------------------------------------------------------

class ZeroThroughput(DetboxError):
    """Upload-time model needs a strictly positive throughput."""


class EmptyCell(DetboxError):
    """A boot-table cell with positive weight has no samples."""


class ZeroBaseline(DetboxError):
    """The accelerated baseline mean is zero; the ratio is undefined."""


class Unstable(DetboxError):
    """Queue is unstable: arrival rate must stay below service rate."""


class Unachievable(DetboxError):
    """No worker count within the search bound meets the wait target."""
