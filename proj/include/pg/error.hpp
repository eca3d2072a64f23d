#pragma once

#include <stdexcept>
#include <string>

namespace pg {

// Base of every library error. The CLI maps the subclasses onto exit codes:
// usage/config problems -> 1, artifact problems -> 2, numeric failures -> 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

// Input outside an operation's mathematical domain (e.g. log of a non-positive entry).
class DomainError : public Error {
public:
    using Error::Error;
};

// A caller broke an API contract (non-scalar backward, k > pool size, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Divergence, non-finite gradients, non-converging iterations.
class NumericError : public Error {
public:
    using Error::Error;
};

class ArtifactError : public Error {
public:
    using Error::Error;
};

class MissingArtifactError : public ArtifactError {
public:
    using ArtifactError::ArtifactError;
};

class FingerprintError : public ArtifactError {
public:
    using ArtifactError::ArtifactError;
};

class VersionError : public ArtifactError {
public:
    using ArtifactError::ArtifactError;
};

class TruncatedArrayError : public ArtifactError {
public:
    using ArtifactError::ArtifactError;
};

class IoError : public ArtifactError {
public:
    using ArtifactError::ArtifactError;
};

}  // namespace pg
