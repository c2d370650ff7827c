#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "shampoo/optim.hpp"
#include "shampoo/tensor.hpp"

namespace shampoo {

/// Bytes per scalar in the gather buffer (little-endian IEEE double).
inline constexpr std::size_t kScalarBytes = 8;

struct BufferRegion {
    std::size_t owner = 0;  // group rank
    std::size_t offset = 0;
    std::size_t length = 0;
};

struct AssignmentPlan {
    std::size_t world_size = 1;
    std::size_t group_size = 1;
    std::vector<std::size_t> block_counts;
    std::vector<std::vector<std::size_t>> assignments;  // per global rank, ascending block indices
    std::vector<std::size_t> counters;                  // per group rank
    std::vector<BufferRegion> layout;                   // per block
    std::size_t max_payload_bytes = 0;
};

/// Longest-first greedy assignment: blocks sorted by variable count
/// (descending, stable), each given to the group rank with the smallest
/// counter (lowest rank on ties), then replicated to every group.
/// Throws InvalidGroupSize unless group_size divides world_size.
AssignmentPlan greedy_assign(std::span<const std::size_t> block_counts, std::size_t world_size,
                             std::size_t group_size);

/// group_size · max payload, in bytes.
std::size_t buffer_size(const AssignmentPlan& plan);

class GatherBuffer {
public:
    explicit GatherBuffer(const AssignmentPlan& plan);

    /// Encodes a block's direction into its region. Throws BufferOverflow if
    /// the data does not match the region length.
    void write(std::size_t block, std::span<const double> values);
    std::vector<double> read(std::size_t block) const;

    /// The bytes owned by one group rank (padded to the maximum payload).
    std::span<const std::uint8_t> region(std::size_t group_rank) const;
    void set_region(std::size_t group_rank, std::span<const std::uint8_t> bytes);

    std::span<const std::uint8_t> bytes() const { return bytes_; }

private:
    const AssignmentPlan* plan_;
    std::vector<std::uint8_t> bytes_;
};

/// Ordered concatenation of every group rank's region into one buffer.
GatherBuffer all_gather(const AssignmentPlan& plan, const std::vector<GatherBuffer>& locals);

struct BlockRef {
    std::size_t param = 0;
    std::size_t block = 0;
};

/// Global block order: parameters in order, blocks within a parameter in
/// plan order.
std::vector<BlockRef> enumerate_blocks(const std::vector<ParamSlot>& params);

struct CommMeter {
    std::size_t buffer_bytes = 0;         // one group's gather per step
    std::size_t payload_bytes_per_rank = 0;
    std::size_t groups = 0;
    std::size_t gathered_bytes_per_step = 0;  // all groups together
    std::vector<std::size_t> state_scalars;   // preconditioner scalars held per global rank
};

CommMeter comm_meter(const AssignmentPlan& plan, const std::vector<ParamSlot>& params);

struct WorkerSim {
    std::size_t rank = 0;
    std::size_t group = 0;
    std::vector<std::size_t> owned;       // global block indices
    std::vector<BlockSlot> states;        // parallel to owned
    std::vector<Tensor> weights;          // full replica
};

/// Data-parallel Shampoo across simulated workers. Each worker keeps
/// optimizer state only for the blocks it owns, computes their directions on
/// its own thread, and all workers apply every direction after the gather.
class DistributedShampoo {
public:
    DistributedShampoo(const std::vector<Shape>& shapes, ShampooConfig cfg, std::size_t world_size,
                       std::size_t group_size, const std::vector<Tensor>& initial_weights);

    /// Throws DivergedReplicas if the replicas disagree afterwards.
    void step(const std::vector<Tensor>& grads);

    const std::vector<Tensor>& weights() const { return workers_.front().weights; }
    const std::vector<WorkerSim>& workers() const { return workers_; }
    const AssignmentPlan& plan() const { return plan_; }
    CommMeter meter() const { return comm_meter(plan_, layout_); }
    std::int64_t step_count() const { return t_; }
    const ShampooConfig& config() const { return cfg_; }

    /// Optimizer state gathered from the first group's owners, in the same
    /// form a single-process ShampooOptimizer keeps it.
    std::vector<ParamSlot> export_state() const;
    void import_state(const std::vector<ParamSlot>& params, std::int64_t t);
    void set_weights(const std::vector<Tensor>& weights);

private:
    ShampooConfig cfg_;
    std::vector<ParamSlot> layout_;  // plans only; states live in workers
    std::vector<BlockRef> blocks_;
    AssignmentPlan plan_;
    std::vector<WorkerSim> workers_;
    std::int64_t t_ = 0;
};

}  // namespace shampoo
