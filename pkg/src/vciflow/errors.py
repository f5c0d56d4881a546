"""Typed error hierarchy shared by all pipeline stages."""


class VciflowError(Exception):
    """Base class for every error raised by this package."""


# codec
class UnsupportedOpcode(VciflowError):
    pass


class TruncatedInstruction(VciflowError):
    pass


class DisplacementOverflow(VciflowError):
    pass


class Unencodable(VciflowError):
    pass


class NoMemoryOperand(VciflowError):
    pass


class UnknownRegister(VciflowError):
    pass


# region building / analysis database
class UndecodableReachableByte(VciflowError):
    pass


class OverlappingCodePaths(VciflowError):
    pass


class VersionMismatch(VciflowError):
    pass


class IoFailure(VciflowError):
    pass


# integration
class InvalidHandle(VciflowError):
    pass


class DeleteLastNodeWithIncomingLinks(VciflowError):
    pass


class BranchIntoInstructionMiddle(VciflowError):
    pass


class UnresolvedImport(VciflowError):
    pass


class LayoutDivergence(VciflowError):
    pass


class RegionImageMismatch(VciflowError):
    pass


# harness
class UndecodableInstruction(VciflowError):
    pass


class MemoryFault(VciflowError):
    pass


class PacketIdExhausted(VciflowError):
    pass


class PacketLogFull(VciflowError):
    pass


class ChannelClosed(VciflowError):
    pass


class ChannelPoisoned(VciflowError):
    pass


# taint engine
class UnknownRegionId(VciflowError):
    pass


class InvalidSourceSpec(VciflowError):
    pass


# cli
class ConfigError(VciflowError):
    pass
