#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "todynet/error.hpp"

namespace todynet {

// Near-isometric partition of [0, length) into `slots` contiguous segments;
// segment lengths differ by at most one.
struct SlotPartition {
    std::size_t slots = 1;
    std::vector<std::size_t> boundaries;  // slots+1 entries, first 0, last length

    std::size_t length() const { return boundaries.empty() ? 0 : boundaries.back(); }
    std::size_t slot_len(std::size_t s) const { return boundaries[s + 1] - boundaries[s]; }
    std::size_t max_slot_len() const {
        std::size_t m = 0;
        for (std::size_t s = 0; s < slots; ++s) m = std::max(m, slot_len(s));
        return m;
    }
};

inline SlotPartition partition_slots(std::size_t length, std::size_t slots) {
    if (slots < 1 || slots > length) {
        throw_config("partition_slots: need 1 <= slots <= length, got slots=" +
                     std::to_string(slots) + " length=" + std::to_string(length));
    }
    SlotPartition p;
    p.slots = slots;
    p.boundaries.resize(slots + 1);
    for (std::size_t i = 0; i <= slots; ++i) p.boundaries[i] = i * length / slots;
    return p;
}

// Valid-length bookkeeping for slot tensors padded to a common within-slot
// length. Positions t < valid[s] of slot s hold real samples.
struct SlotMask {
    std::size_t slots = 0;
    std::size_t tau = 0;
    std::vector<std::size_t> valid;

    static SlotMask from_partition(const SlotPartition& p) {
        SlotMask m;
        m.slots = p.slots;
        m.tau = p.max_slot_len();
        m.valid.resize(p.slots);
        for (std::size_t s = 0; s < p.slots; ++s) m.valid[s] = p.slot_len(s);
        return m;
    }

    static SlotMask full(std::size_t slots, std::size_t tau) {
        SlotMask m;
        m.slots = slots;
        m.tau = tau;
        m.valid.assign(slots, tau);
        return m;
    }

    // After a valid convolution of width k along the within-slot axis.
    SlotMask cropped(std::size_t k) const {
        SlotMask m;
        m.slots = slots;
        m.tau = tau - (k - 1);
        m.valid.resize(slots);
        for (std::size_t s = 0; s < slots; ++s) {
            m.valid[s] = valid[s] + 1 > k ? valid[s] - (k - 1) : 0;
        }
        return m;
    }

    std::size_t total_valid() const {
        std::size_t n = 0;
        for (std::size_t v : valid) n += v;
        return n;
    }
};

}  // namespace todynet
