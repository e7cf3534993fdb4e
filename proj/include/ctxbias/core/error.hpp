#pragma once

#include <stdexcept>
#include <string>

namespace ctxbias {

// Base class for all toolkit errors. Subclasses map onto CLI exit codes:
// config_error -> 2, pipeline_error -> 3, numeric_error -> 4, rest -> 4.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user input: malformed config file, invalid flag combination.
struct config_error : error {
    using error::error;
};

// A manifest, tensor file or checkpoint violates its documented schema.
struct schema_error : error {
    using error::error;
};

// A referenced file is missing or unreadable.
struct load_error : error {
    using error::error;
};

// Binary container corruption: bad magic, truncated payload, non-finite data.
struct format_error : error {
    using error::error;
};

// An ablation/capture request names an unknown layer or malformed mask.
struct hook_error : error {
    using error::error;
};

// A required upstream artifact (checkpoint, feature store, ...) is absent.
// The message names the command that would produce it.
struct pipeline_error : error {
    using error::error;
};

// Numeric failure at runtime: divergence, domain violation, degenerate map.
struct numeric_error : error {
    using error::error;
};

}  // namespace ctxbias
