#include "shampoo/dist.hpp"

#include <algorithm>
#include <bit>
#include <exception>
#include <numeric>
#include <thread>

#include "shampoo/error.hpp"

namespace shampoo {

AssignmentPlan greedy_assign(std::span<const std::size_t> block_counts, std::size_t world_size,
                             std::size_t group_size) {
    if (group_size == 0 || world_size == 0 || world_size % group_size != 0) {
        throw Error(ErrorCode::InvalidGroupSize, "group size " + std::to_string(group_size) +
                                                     " does not divide world size " + std::to_string(world_size));
    }
    for (std::size_t c : block_counts) {
        if (c == 0) throw Error(ErrorCode::InvalidArgument, "block variable counts must be positive");
    }

    AssignmentPlan plan;
    plan.world_size = world_size;
    plan.group_size = group_size;
    plan.block_counts.assign(block_counts.begin(), block_counts.end());
    plan.counters.assign(group_size, 0);

    std::vector<std::size_t> order(block_counts.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return block_counts[a] > block_counts[b]; });

    std::vector<std::vector<std::size_t>> per_group_rank(group_size);
    std::vector<std::size_t> owner(block_counts.size());
    for (std::size_t block : order) {
        const auto it = std::min_element(plan.counters.begin(), plan.counters.end());
        const auto k = static_cast<std::size_t>(it - plan.counters.begin());
        per_group_rank[k].push_back(block);
        plan.counters[k] += block_counts[block];
        owner[block] = k;
    }
    for (auto& owned : per_group_rank) std::sort(owned.begin(), owned.end());

    plan.assignments.resize(world_size);
    for (std::size_t r = 0; r < world_size; ++r) plan.assignments[r] = per_group_rank[r % group_size];

    const std::size_t max_count = block_counts.empty() ? 0 : *std::max_element(plan.counters.begin(), plan.counters.end());
    plan.max_payload_bytes = max_count * kScalarBytes;
    plan.layout.resize(block_counts.size());
    for (std::size_t k = 0; k < group_size; ++k) {
        std::size_t offset = k * plan.max_payload_bytes;
        for (std::size_t block : per_group_rank[k]) {
            const std::size_t length = block_counts[block] * kScalarBytes;
            plan.layout[block] = BufferRegion{k, offset, length};
            offset += length;
        }
    }
    return plan;
}

std::size_t buffer_size(const AssignmentPlan& plan) { return plan.group_size * plan.max_payload_bytes; }

GatherBuffer::GatherBuffer(const AssignmentPlan& plan) : plan_(&plan), bytes_(buffer_size(plan), 0) {}

void GatherBuffer::write(std::size_t block, std::span<const double> values) {
    if (block >= plan_->layout.size()) throw Error(ErrorCode::BufferOverflow, "block index outside the layout");
    const BufferRegion& r = plan_->layout[block];
    if (values.size() * kScalarBytes != r.length || r.offset + r.length > bytes_.size()) {
        throw Error(ErrorCode::BufferOverflow, "block " + std::to_string(block) + " does not fit its region");
    }
    std::uint8_t* out = bytes_.data() + r.offset;
    for (double v : values) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (std::size_t b = 0; b < kScalarBytes; ++b) *out++ = static_cast<std::uint8_t>(bits >> (8 * b));
    }
}

std::vector<double> GatherBuffer::read(std::size_t block) const {
    if (block >= plan_->layout.size()) throw Error(ErrorCode::BufferOverflow, "block index outside the layout");
    const BufferRegion& r = plan_->layout[block];
    std::vector<double> values(r.length / kScalarBytes);
    const std::uint8_t* in = bytes_.data() + r.offset;
    for (double& v : values) {
        std::uint64_t bits = 0;
        for (std::size_t b = 0; b < kScalarBytes; ++b) bits |= static_cast<std::uint64_t>(*in++) << (8 * b);
        v = std::bit_cast<double>(bits);
    }
    return values;
}

std::span<const std::uint8_t> GatherBuffer::region(std::size_t group_rank) const {
    if (group_rank >= plan_->group_size) throw Error(ErrorCode::BufferOverflow, "group rank out of range");
    return std::span<const std::uint8_t>(bytes_).subspan(group_rank * plan_->max_payload_bytes,
                                                         plan_->max_payload_bytes);
}

void GatherBuffer::set_region(std::size_t group_rank, std::span<const std::uint8_t> bytes) {
    if (group_rank >= plan_->group_size || bytes.size() != plan_->max_payload_bytes) {
        throw Error(ErrorCode::BufferOverflow, "region size mismatch");
    }
    std::copy(bytes.begin(), bytes.end(), bytes_.begin() + static_cast<std::ptrdiff_t>(group_rank * plan_->max_payload_bytes));
}

GatherBuffer all_gather(const AssignmentPlan& plan, const std::vector<GatherBuffer>& locals) {
    if (locals.size() != plan.group_size) throw Error(ErrorCode::BufferOverflow, "one local buffer per group rank");
    GatherBuffer out(plan);
    for (std::size_t k = 0; k < plan.group_size; ++k) out.set_region(k, locals[k].region(k));
    return out;
}

std::vector<BlockRef> enumerate_blocks(const std::vector<ParamSlot>& params) {
    std::vector<BlockRef> out;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t b = 0; b < params[p].blocks.size(); ++b) out.push_back({p, b});
    return out;
}

CommMeter comm_meter(const AssignmentPlan& plan, const std::vector<ParamSlot>& params) {
    CommMeter m;
    m.buffer_bytes = buffer_size(plan);
    m.payload_bytes_per_rank = plan.max_payload_bytes;
    m.groups = plan.world_size / plan.group_size;
    m.gathered_bytes_per_step = m.groups * m.buffer_bytes;
    const std::vector<BlockRef> blocks = enumerate_blocks(params);
    m.state_scalars.assign(plan.world_size, 0);
    for (std::size_t r = 0; r < plan.world_size; ++r) {
        for (std::size_t b : plan.assignments[r]) {
            const ParamSlot& p = params[blocks[b].param];
            m.state_scalars[r] += block_memory(p.blocks[blocks[b].block].block, p.plan.kind);
        }
    }
    return m;
}

namespace {

std::vector<std::size_t> block_counts(const std::vector<ParamSlot>& params, const std::vector<BlockRef>& blocks) {
    std::vector<std::size_t> counts;
    for (const BlockRef& ref : blocks) counts.push_back(params[ref.param].blocks[ref.block].block.numel());
    return counts;
}

}  // namespace

DistributedShampoo::DistributedShampoo(const std::vector<Shape>& shapes, ShampooConfig cfg, std::size_t world_size,
                                       std::size_t group_size, const std::vector<Tensor>& initial_weights)
    : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (const Shape& s : shapes) layout_.push_back(make_param_slot(s, cfg_));
    blocks_ = enumerate_blocks(layout_);
    plan_ = greedy_assign(block_counts(layout_, blocks_), world_size, group_size);

    std::vector<Tensor> zero_grads;
    for (const Shape& s : shapes) zero_grads.emplace_back(s);
    check_gradients(shapes, initial_weights, zero_grads);

    for (std::size_t r = 0; r < world_size; ++r) {
        WorkerSim w;
        w.rank = r;
        w.group = r / group_size;
        w.owned = plan_.assignments[r];
        for (std::size_t b : w.owned) w.states.push_back(layout_[blocks_[b].param].blocks[blocks_[b].block]);
        w.weights = initial_weights;
        workers_.push_back(std::move(w));
    }
    // Non-owned state is never materialized on a worker.
    for (ParamSlot& p : layout_)
        for (BlockSlot& b : p.blocks) b = BlockSlot{b.block, b.kind, {}, {}, {}, {}, {}};
}

void DistributedShampoo::step(const std::vector<Tensor>& grads) {
    std::vector<Shape> shapes;
    for (const ParamSlot& p : layout_) shapes.push_back(p.shape);
    check_gradients(shapes, workers_.front().weights, grads);
    const double alpha = lr_at(cfg_.lr, t_);

    std::vector<Tensor> merged_grads;
    for (std::size_t i = 0; i < grads.size(); ++i) merged_grads.push_back(grads[i].reshaped(layout_[i].plan.merged_shape));

    std::vector<GatherBuffer> locals(workers_.size(), GatherBuffer(plan_));
    std::vector<std::exception_ptr> errors(workers_.size());
    std::vector<std::thread> threads;
    for (std::size_t r = 0; r < workers_.size(); ++r) {
        threads.emplace_back([&, r] {
            try {
                WorkerSim& w = workers_[r];
                for (std::size_t i = 0; i < w.owned.size(); ++i) {
                    const BlockRef& ref = blocks_[w.owned[i]];
                    const ParamSlot& p = layout_[ref.param];
                    const Block& blk = p.blocks[ref.block].block;
                    const Tensor wb = extract_block(w.weights[ref.param].reshaped(p.plan.merged_shape), blk);
                    const Tensor dir = compute_block_direction(w.states[i], extract_block(merged_grads[ref.param], blk),
                                                               wb, t_, cfg_);
                    locals[r].write(w.owned[i], dir.data());
                }
            } catch (...) {
                errors[r] = std::current_exception();
            }
        });
    }
    for (std::thread& th : threads) th.join();
    for (const std::exception_ptr& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    const std::size_t jg = plan_.group_size;
    for (std::size_t g = 0; g < workers_.size() / jg; ++g) {
        const std::vector<GatherBuffer> group_locals(locals.begin() + static_cast<std::ptrdiff_t>(g * jg),
                                                     locals.begin() + static_cast<std::ptrdiff_t>((g + 1) * jg));
        const GatherBuffer gathered = all_gather(plan_, group_locals);
        for (std::size_t k = 0; k < jg; ++k) {
            WorkerSim& w = workers_[g * jg + k];
            for (std::size_t i = 0; i < layout_.size(); ++i) {
                const ParamSlot& p = layout_[i];
                Tensor merged = w.weights[i].reshaped(p.plan.merged_shape);
                for (std::size_t b = 0; b < blocks_.size(); ++b) {
                    if (blocks_[b].param != i) continue;
                    const Block& blk = p.blocks[blocks_[b].block].block;
                    const std::vector<double> dir = gathered.read(b);
                    Tensor wb = extract_block(merged, blk);
                    for (std::size_t e = 0; e < wb.numel(); ++e) wb[e] += -alpha * dir[e];
                    scatter_block(merged, blk, wb);
                }
                w.weights[i] = merged.reshaped(p.shape);
            }
        }
    }

    for (std::size_t r = 1; r < workers_.size(); ++r) {
        for (std::size_t i = 0; i < layout_.size(); ++i) {
            if (max_abs_diff(workers_[r].weights[i].data(), workers_[0].weights[i].data()) > 1e-12) {
                throw Error(ErrorCode::DivergedReplicas,
                            "worker " + std::to_string(r) + " diverged on parameter " + std::to_string(i));
            }
        }
    }
    ++t_;
}

std::vector<ParamSlot> DistributedShampoo::export_state() const {
    std::vector<ParamSlot> out = layout_;
    for (std::size_t k = 0; k < plan_.group_size; ++k) {
        const WorkerSim& w = workers_[k];
        for (std::size_t i = 0; i < w.owned.size(); ++i) {
            const BlockRef& ref = blocks_[w.owned[i]];
            out[ref.param].blocks[ref.block] = w.states[i];
        }
    }
    return out;
}

void DistributedShampoo::import_state(const std::vector<ParamSlot>& params, std::int64_t t) {
    if (params.size() != layout_.size()) throw Error(ErrorCode::ShapeMismatch, "parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape != layout_[i].shape || params[i].blocks.size() != layout_[i].blocks.size()) {
            throw Error(ErrorCode::ShapeMismatch, "parameter " + std::to_string(i) + " layout mismatch");
        }
    }
    for (WorkerSim& w : workers_) {
        for (std::size_t i = 0; i < w.owned.size(); ++i) {
            const BlockRef& ref = blocks_[w.owned[i]];
            w.states[i] = params[ref.param].blocks[ref.block];
        }
    }
    t_ = t;
}

void DistributedShampoo::set_weights(const std::vector<Tensor>& weights) {
    std::vector<Shape> shapes;
    std::vector<Tensor> zero_grads;
    for (const ParamSlot& p : layout_) {
        shapes.push_back(p.shape);
        zero_grads.emplace_back(p.shape);
    }
    check_gradients(shapes, weights, zero_grads);
    for (WorkerSim& w : workers_) w.weights = weights;
}

}  // namespace shampoo
