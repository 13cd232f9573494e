#include "cichlid/pager.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace cichlid {

Result<void> BackingStore::write_page(std::uint64_t region_id,
                                      std::uint64_t index,
                                      std::span<const std::byte> data) {
  if (data.size() != page_bytes_) return Errc::InvalidArgument;
  const auto key = std::make_pair(region_id, index);
  auto it = pages_.find(key);
  if (it == pages_.end()) {
    if (max_pages_ != 0 && pages_.size() >= max_pages_) return Errc::StoreFull;
    pages_.emplace(key, std::vector<std::byte>(data.begin(), data.end()));
  } else {
    it->second.assign(data.begin(), data.end());
  }
  ++writes_;
  return {};
}

bool BackingStore::has_page(std::uint64_t region_id,
                            std::uint64_t index) const {
  return pages_.count({region_id, index}) > 0;
}

Result<void> BackingStore::read_page(std::uint64_t region_id,
                                     std::uint64_t index,
                                     std::span<std::byte> out) const {
  auto it = pages_.find({region_id, index});
  if (it == pages_.end()) return Errc::InvalidArgument;
  if (out.size() != it->second.size()) return Errc::InvalidArgument;
  std::memcpy(out.data(), it->second.data(), out.size());
  ++reads_;
  return {};
}

namespace {
constexpr std::array<char, 8> kStoreMagic = {'C', 'C', 'L', 'D',
                                             'S', 'T', 'O', 'R'};
}

Result<void> BackingStore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) return Errc::InvalidArgument;
  auto put_u64 = [&](std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), 8);
  };
  out.write(kStoreMagic.data(), kStoreMagic.size());
  put_u64(page_bytes_);
  put_u64(pages_.size());
  // Index table: (region, page, absolute file offset), then raw images.
  std::uint64_t offset = 8 + 16 + pages_.size() * 24;
  for (const auto& [key, img] : pages_) {
    put_u64(key.first);
    put_u64(key.second);
    put_u64(offset);
    offset += img.size();
  }
  for (const auto& [key, img] : pages_) {
    out.write(reinterpret_cast<const char*>(img.data()),
              static_cast<std::streamsize>(img.size()));
  }
  if (!out) return Errc::InvalidArgument;
  return {};
}

Result<BackingStore> BackingStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return Errc::InvalidArgument;
  std::array<char, 8> magic;
  in.read(magic.data(), magic.size());
  if (!in || magic != kStoreMagic) return Errc::InvalidArgument;
  auto get_u64 = [&]() {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
  };
  const std::uint64_t page_bytes = get_u64();
  const std::uint64_t count = get_u64();
  if (!in || page_bytes == 0) return Errc::InvalidArgument;
  BackingStore store(page_bytes);
  std::vector<std::tuple<std::uint64_t, std::uint64_t, std::uint64_t>> index;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t region = get_u64();
    const std::uint64_t page = get_u64();
    const std::uint64_t offset = get_u64();
    index.emplace_back(region, page, offset);
  }
  if (!in) return Errc::InvalidArgument;
  for (const auto& [region, page, offset] : index) {
    std::vector<std::byte> img(page_bytes);
    in.seekg(static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(img.data()),
            static_cast<std::streamsize>(page_bytes));
    if (!in) return Errc::InvalidArgument;
    store.pages_.emplace(std::make_pair(region, page), std::move(img));
  }
  return store;
}

// --- pager ---------------------------------------------------------------

Result<std::unique_ptr<Pager>> Pager::attach(VSpace& vs, VRegion& r,
                                             unsigned resident_frames,
                                             BackingStore& store) {
  if (resident_frames == 0) return Errc::NoFrames;
  if (r.pager != nullptr) return Errc::InvalidArgument;
  if (store.page_bytes() != bytes_of(r.leaf_size)) return Errc::InvalidArgument;
  for (const auto& pc : r.obj.pieces) {
    if (pc.size != bytes_of(r.leaf_size)) return Errc::InvalidArgument;
  }
  if (resident_frames > r.obj.pieces.size()) return Errc::NoFrames;

  auto pager = std::unique_ptr<Pager>(new Pager());
  pager->vs_ = &vs;
  pager->region_ = &r;
  pager->store_ = &store;
  pager->limit_ = resident_frames;

  // Drop the region's eager mappings; faults drive residency from now on.
  System& sys = vs.sys();
  const std::uint64_t n = r.pages();
  for (std::uint64_t i = 0; i < n; ++i) {
    auto u = vs.unmap_leaf(r, i);
    if (!u) return u.error();
  }
  for (CapHandle c : r.use_copies) {
    auto d = sys.delete_cap(vs.proc(), c);
    if (!d) return d.error();
  }
  r.use_copies.clear();

  for (unsigned i = 0; i < resident_frames; ++i) {
    PoolFrame pf;
    pf.frame = r.obj.pieces[i].frame;
    auto copy = sys.copy_cap(vs.proc(), pf.frame);
    if (!copy) return copy.error();
    pf.copy = *copy;
    auto view = sys.lookup(vs.proc(), pf.frame);
    if (!view) return view.error();
    pf.base = view->base;
    pager->pool_.push_back(pf);
    pager->free_frames_.push_back(i);
  }
  r.pager = pager.get();
  return pager;
}

Pager::~Pager() {
  if (region_ != nullptr) region_->pager = nullptr;
}

Result<void> Pager::add_frames(unsigned count) {
  System& sys = vs_->sys();
  for (unsigned i = 0; i < count; ++i) {
    const std::size_t next = pool_.size();
    if (next >= region_->obj.pieces.size()) return Errc::NoFrames;
    PoolFrame pf;
    pf.frame = region_->obj.pieces[next].frame;
    auto copy = sys.copy_cap(vs_->proc(), pf.frame);
    if (!copy) return copy.error();
    pf.copy = *copy;
    auto view = sys.lookup(vs_->proc(), pf.frame);
    if (!view) return view.error();
    pf.base = view->base;
    pool_.push_back(pf);
    free_frames_.push_back(static_cast<unsigned>(next));
    ++limit_;
  }
  return {};
}

Result<void> Pager::evict_one() {
  const std::uint64_t victim = fifo_.front();
  const unsigned slot = resident_.at(victim);
  auto st = vs_->page_status(*region_, victim);
  if (!st) return st.error();
  const bool dirty = st->second;
  if (dirty) {
    std::vector<std::byte> buf(store_->page_bytes());
    vs_->sys().mem().read_bytes(pool_[slot].base, buf);
    auto w = store_->write_page(region_->base, victim, buf);
    if (!w) return w;
  }
  auto u = vs_->unmap_leaf(*region_, victim);
  if (!u) return u;
  fifo_.pop_front();
  resident_.erase(victim);
  free_frames_.push_back(slot);
  ++evictions_;
  return {};
}

Result<void> Pager::page_in(std::uint64_t index) {
  if (free_frames_.empty()) {
    auto e = evict_one();
    if (!e) return e;
  }
  const unsigned slot = free_frames_.back();
  free_frames_.pop_back();
  PhysMem& mem = vs_->sys().mem();
  if (store_->has_page(region_->base, index)) {
    std::vector<std::byte> buf(store_->page_bytes());
    auto r = store_->read_page(region_->base, index, buf);
    if (!r) return r;
    mem.write_bytes(pool_[slot].base, buf);
    ++loads_;
  } else {
    mem.fill(pool_[slot].base, store_->page_bytes(), 0);
    ++zero_fills_;
  }
  auto m = vs_->map_leaf(*region_, index, pool_[slot].copy, region_->flags);
  if (!m) {
    free_frames_.push_back(slot);
    return m;
  }
  fifo_.push_back(index);
  resident_[index] = slot;
  return {};
}

bool Pager::handle_fault(const Fault& f) {
  if (f.va < region_->base || f.va >= region_->base + region_->length) {
    return false;
  }
  const std::uint64_t index =
      (f.va - region_->base) / bytes_of(region_->leaf_size);
  if (resident_.count(index) > 0) {
    // Already resident (e.g. a protection fault); let the retry proceed.
    return true;
  }
  ++faults_;
  auto r = page_in(index);
  return r.ok();
}

}  // namespace cichlid
