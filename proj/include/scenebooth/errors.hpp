#pragma once

#include <stdexcept>
#include <string>

namespace scenebooth {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct invalid_range_error : error {
    using error::error;
};

struct shape_error : error {
    using error::error;
};

// Non-finite loss or activation during optimisation.
struct training_error : error {
    using error::error;
};

// Non-finite value during reverse diffusion.
struct sampling_error : error {
    using error::error;
};

// Violated precondition on scene content (subject count, empty inputs, ...).
struct input_error : error {
    using error::error;
};

// File, schema or serialisation problem. Carries the offending path when known.
struct io_error : error {
    using error::error;
};

}  // namespace scenebooth
