#pragma once

#include <cstring>
#include <iosfwd>
#include <string>
#include <vector>

#include "voxrep/common.hpp"

namespace voxrep {

// Dense row-major buffer. No autograd here; see autograd.hpp for graph nodes.
template <class S>
struct TensorData {
    Shape shape;
    AlignedVec<S> v;

    TensorData() = default;
    explicit TensorData(Shape s) : shape(std::move(s)), v(::voxrep::numel(shape), S(0)) {}
    TensorData(Shape s, AlignedVec<S> values) : shape(std::move(s)), v(std::move(values)) {
        check_count();
    }
    TensorData(Shape s, const std::vector<S>& values)
        : shape(std::move(s)), v(values.begin(), values.end()) {
        check_count();
    }
    TensorData(Shape s, std::initializer_list<S> values)
        : shape(std::move(s)), v(values.begin(), values.end()) {
        check_count();
    }

    static TensorData zeros(Shape s) { return TensorData(std::move(s)); }
    static TensorData full(Shape s, S value) {
        TensorData t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }
    static TensorData scalar(S value) { return TensorData({1}, {value}); }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }

    S* data() { return v.data(); }
    const S* data() const { return v.data(); }

    template <class T>
    TensorData<T> cast() const {
        TensorData<T> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
        return out;
    }

private:
    void check_count() const {
        if (static_cast<int64_t>(v.size()) != ::voxrep::numel(shape))
            throw ShapeError("TensorData: value count " + std::to_string(v.size()) +
                             " does not match shape " + shape_str(shape));
    }
};

using TensorF = TensorData<float>;
using TensorD = TensorData<double>;

// ---------------------------------------------------------------------------
// VXT1 container: magic "VXT1", u32 rank, u32 dims[rank], then little-endian
// float32 payload, row-major with time as the slowest axis.
// ---------------------------------------------------------------------------

void write_vxt(std::ostream& os, const TensorF& t);
void write_vxt(const std::string& path, const TensorF& t);
TensorF read_vxt(std::istream& is);
TensorF read_vxt(const std::string& path);

}  // namespace voxrep
